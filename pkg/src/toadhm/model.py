"""Fully convolutional heat-map classifier and its global-max-pool wrapper.

``HeatmapNet`` = stride-32 backbone + 1x1 single-filter sigmoid head.  It
accepts any input whose sides are multiples of 32.  ``gmp_forward`` reduces
the heat-map to one score by its spatial maximum.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .targets import STRIDE

HEAD_WEIGHT_DECAY = 1e-5


class CheckpointError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    """Channel widths of the five stride-2 stages.

    Stages at index >= ``extra_from`` get a second, stride-1 3x3 conv.
    """

    widths: tuple[int, ...] = (32, 32, 64, 96, 128)
    extra_from: int = 2
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5:
            raise ValueError(f"need 5 stage widths for stride 32, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("stage widths must be positive")
        if not 0 <= self.extra_from <= 5:
            raise ValueError("extra_from must lie in [0, 5]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _conv_bn_relu(c_in, c_out, stride):
    return [nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False),
            nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]


class ReferenceBackbone(nn.Module):
    """Plain strided-conv backbone satisfying the stride-32 contract."""

    stride = STRIDE

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        layers = []
        c = self.config.in_channels
        for i, width in enumerate(self.config.widths):
            layers += _conv_bn_relu(c, width, 2)
            c = width
            if i >= self.config.extra_from:
                layers += _conv_bn_relu(c, c, 1)
        self.body = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x):
        return self.body(x)


def build_reference_backbone(config: BackboneConfig | dict | None = None) -> ReferenceBackbone:
    if isinstance(config, dict):
        config = BackboneConfig(**config)
    return ReferenceBackbone(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class HeatmapHead(nn.Module):
    """1x1 convolution to one channel followed by a sigmoid."""

    def __init__(self, features: int, seed: int = 0):
        super().__init__()
        if features < 1:
            raise ValueError("features must be >= 1")
        self.conv = nn.Conv2d(features, 1, kernel_size=1, bias=True)
        self.seed = seed
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        # Glorot uniform for a 1x1 conv: fan_in = F, fan_out = 1
        limit = self.glorot_limit(self.conv.in_channels)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.conv.weight.uniform_(-limit, limit, generator=gen)
            self.conv.bias.zero_()

    @staticmethod
    def glorot_limit(features: int) -> float:
        return math.sqrt(6.0 / (features + 1))

    def logits(self, features):
        return self.conv(features)

    def forward(self, features):
        return torch.sigmoid(self.conv(features))


def init_head(features: int, seed: int = 0) -> HeatmapHead:
    return HeatmapHead(features, seed)


class HeatmapNet(nn.Module):
    def __init__(self, backbone: nn.Module, head_seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.head = HeatmapHead(backbone.out_channels, head_seed)

    def forward(self, x):
        """(N, 3, H, W) -> (N, 1, H/32, W/32) in (0, 1)."""
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"input {h}x{w} not divisible by {STRIDE}")
        return self.head(self.backbone(x))


class GmpNet(nn.Module):
    """Whole-image classifier: heat-map followed by global spatial max pooling."""

    def __init__(self, heatmap_net: HeatmapNet):
        super().__init__()
        self.heatmap_net = heatmap_net

    def forward(self, x):
        return global_max_pool(self.heatmap_net(x))


def global_max_pool(heatmaps: torch.Tensor) -> torch.Tensor:
    """(N, 1, h, w) -> (N,)"""
    return heatmaps.flatten(1).amax(dim=1)


def build_model(backbone_config: BackboneConfig | dict | None = None, head_seed: int = 0) -> HeatmapNet:
    return HeatmapNet(build_reference_backbone(backbone_config), head_seed)


def to_tensor(images) -> torch.Tensor:
    """HxWx3 (or NxHxWx3) float array to an NCHW float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def heatmap_forward(model: HeatmapNet, image: np.ndarray) -> np.ndarray:
    """Normalized HxWx3 image -> (H/32)x(W/32) heat-map."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 input, got {image.shape}")
    if image.shape[0] % STRIDE or image.shape[1] % STRIDE:
        raise ValueError(f"input {image.shape[:2]} not divisible by {STRIDE}")
    model.eval()
    return model(to_tensor(image))[0, 0].numpy()


def gmp_forward(model: HeatmapNet, image: np.ndarray) -> float:
    return float(heatmap_forward(model, image).max())


# -- checkpoints ------------------------------------------------------------

WEIGHTS_NAME = "model.pt"
META_NAME = "model.json"


def save_checkpoint(model: HeatmapNet, directory, provenance: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (WEIGHTS_NAME + ".tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(directory / WEIGHTS_NAME)
    meta = {
        "backbone": model.backbone.config.to_dict(),
        "features": model.backbone.out_channels,
        "stride": STRIDE,
        "head_seed": model.head.seed,
        "provenance": provenance or {},
    }
    (directory / META_NAME).write_text(json.dumps(meta, indent=1))
    return directory


def load_checkpoint(directory) -> HeatmapNet:
    directory = Path(directory)
    try:
        meta = json.loads((directory / META_NAME).read_text())
        model = build_model(BackboneConfig(**meta["backbone"]), meta.get("head_seed", 0))
        state = torch.load(directory / WEIGHTS_NAME, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint from {directory}: {exc}") from exc
    if meta.get("stride", STRIDE) != STRIDE:
        raise CheckpointError(f"checkpoint stride {meta['stride']} != {STRIDE}")
    model.eval()
    return model
