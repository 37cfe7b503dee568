"""Per-pixel training losses with analytic gradients.

NumPy versions (value + gradient w.r.t. the prediction) are the reference;
the torch versions are what the training loop differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_WT = 100.0
DEFAULT_EPS = 1e-7
LOSS_KINDS = ("weighted_bce", "mse")


@dataclass
class LossConfig:
    kind: str = "mse"
    W_t: float = DEFAULT_WT
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.W_t < 1:
            raise ValueError("W_t must be >= 1")
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")
        if self.kind == "mse" and self.W_t != DEFAULT_WT:
            raise ValueError("mse takes no class weight; leave W_t at its default")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "W_t": self.W_t, "epsilon": self.epsilon}


def _check(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: target {y.shape} vs prediction {p.shape}")
    return y, p


def weighted_bce(y, p, W_t: float = DEFAULT_WT, eps: float = DEFAULT_EPS) -> float:
    """Mean of -W_t*y*log(p) - (1-y)*log(1-p), p clamped to [eps, 1-eps]."""
    y, p = _check(y, p)
    p = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-W_t * y * np.log(p) - (1.0 - y) * np.log1p(-p)))


def weighted_bce_grad(y, p, W_t: float = DEFAULT_WT, eps: float = DEFAULT_EPS) -> np.ndarray:
    y, p = _check(y, p)
    inside = (p >= eps) & (p <= 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    g = (-W_t * y / pc + (1.0 - y) / (1.0 - pc)) / y.size
    return np.where(inside, g, 0.0)


def mse(y, p) -> float:
    y, p = _check(y, p)
    return float(np.mean((y - p) ** 2))


def mse_grad(y, p) -> np.ndarray:
    y, p = _check(y, p)
    return 2.0 * (p - y) / y.size


def torch_weighted_bce(y: torch.Tensor, p: torch.Tensor, W_t: float = DEFAULT_WT,
                       eps: float = DEFAULT_EPS) -> torch.Tensor:
    p = p.clamp(eps, 1.0 - eps)
    return torch.mean(-W_t * y * torch.log(p) - (1.0 - y) * torch.log1p(-p))


def torch_mse(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    return torch.mean((y - p) ** 2)


def torch_loss(config: LossConfig):
    """Callable ``(target, prediction) -> scalar tensor`` for a LossConfig."""
    if config.kind == "mse":
        return torch_mse
    return lambda y, p: torch_weighted_bce(y, p, config.W_t, config.epsilon)
