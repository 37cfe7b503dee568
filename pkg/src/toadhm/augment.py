"""Paired image/mask augmentation and input normalization.

Geometric steps run identically on image and mask (mask with nearest
sampling), photometric steps touch the image only:

    1 crop1  2 rotate  3 shrink  4 perspective  5 flip  6 crop2
    7 divide by 125.5  8 subtract mean  9 intensity scale
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np

from .data import FrameRecord
from .targets import STRIDE, target_from_mask

log = logging.getLogger(__name__)

INTENSITY_DIVISOR = 125.5
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
BORDER = cv2.BORDER_REFLECT_101

STEP_NAMES = ("crop1", "rotate", "shrink", "perspective", "flip", "crop2",
              "divide", "subtract_mean", "intensity")


@dataclass
class AugmentConfig:
    rotation_range: tuple[float, float] = (-360.0, 360.0)
    shrink_range: tuple[float, float] = (0.9, 1.0)
    flip_prob: float = 0.5
    crop1: tuple[int, int] = (720, 720)
    crop2: tuple[int, int] = (704, 704)
    intensity_range: tuple[float, float] = (0.75, 1.25)
    perspective_magnitude: float = 0.05
    enabled: bool = True

    def __post_init__(self):
        self.rotation_range = tuple(float(v) for v in self.rotation_range)
        self.shrink_range = tuple(float(v) for v in self.shrink_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.crop1 = tuple(int(v) for v in self.crop1)
        self.crop2 = tuple(int(v) for v in self.crop2)
        lo, hi = self.rotation_range
        if not -360.0 <= lo <= hi <= 360.0:
            raise ValueError(f"rotation_range {self.rotation_range} outside [-360, 360]")
        lo, hi = self.shrink_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"shrink_range {self.shrink_range} must lie in (0, 1]")
        lo, hi = self.intensity_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"intensity_range {self.intensity_range} invalid")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")
        if not 0.0 <= self.perspective_magnitude <= 0.1:
            raise ValueError("perspective_magnitude must lie in [0, 0.1]")
        if self.crop2[0] > self.crop1[0] or self.crop2[1] > self.crop1[1]:
            raise ValueError(f"crop2 {self.crop2} larger than crop1 {self.crop1}")
        if self.crop2[0] % STRIDE or self.crop2[1] % STRIDE:
            raise ValueError(f"crop2 {self.crop2} not divisible by {STRIDE}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainingSample:
    X: np.ndarray
    Y: np.ndarray
    label: str
    trace: list = field(default_factory=list, repr=False)


def gray_triple(image: np.ndarray) -> np.ndarray:
    """BT.601 luma copied into all three channels (float64)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {image.shape}")
    luma = image.astype(np.float64) @ LUMA_WEIGHTS
    return np.repeat(luma[..., None], 3, axis=2)


def normalize(image: np.ndarray, s: float = 1.0) -> np.ndarray:
    """X = (Z - mean(Z)) * s with Z = I / 125.5; mean over pixels and channels."""
    z = np.asarray(image, dtype=np.float64) / INTENSITY_DIVISOR
    return (z - z.mean()) * s


def hflip(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[:, ::-1])


def _translation(dy, dx):
    return np.array([[1.0, 0.0, -dx], [0.0, 1.0, -dy], [0.0, 0.0, 1.0]])


def _about_center(m2x2, h, w):
    """3x3 homography applying ``m2x2`` about the pixel center of an h x w frame."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m = np.eye(3)
    m[:2, :2] = m2x2
    return _translation(-cy, -cx) @ m @ _translation(cy, cx)


def _warp(image, mask, matrix):
    h, w = mask.shape
    size = (w, h)
    image = cv2.warpPerspective(image, matrix, size, flags=cv2.INTER_LINEAR, borderMode=BORDER)
    mask = cv2.warpPerspective(mask, matrix, size, flags=cv2.INTER_NEAREST, borderMode=BORDER)
    return image, mask


def _crop(image, mask, size, rng, random):
    h, w = mask.shape
    ch, cw = size
    if h < ch or w < cw:
        raise ValueError(f"image {h}x{w} smaller than crop {ch}x{cw}")
    if random:
        dy, dx = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    else:
        dy, dx = (h - ch) // 2, (w - cw) // 2
    return dy, dx


def augment_pair(record: FrameRecord, seed: int, config: AugmentConfig,
                 trace: bool = False) -> TrainingSample:
    """Steps 1-9 on a record; the mask is turned into a Gaussian target afterwards.

    All randomness comes from ``np.random.default_rng(seed)`` with a fixed
    draw order, so changing one probability (e.g. ``flip_prob``) leaves the
    other parameters untouched.  With ``config.enabled`` false only the
    center crops remain and s = 1.
    """
    rng = np.random.default_rng(seed)
    on = config.enabled
    steps = []
    # three identical channels, so warp one and stack at the end
    gray = gray_triple(record.image)[..., 0].astype(np.float32)
    mask = (record.mask_or_zeros() != 0).astype(np.uint8)

    # 1. crop1
    dy, dx = _crop(gray, mask, config.crop1, rng, on)
    h, w = config.crop1
    gray, mask = gray[dy:dy + h, dx:dx + w], mask[dy:dy + h, dx:dx + w]
    steps.append(("crop1", {"offset": (dy, dx)}, _translation(dy, dx)))

    # 2. rotate
    angle = rng.uniform(*config.rotation_range) if on else 0.0
    t = np.deg2rad(angle)
    rot = _about_center(np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]]), h, w)
    if angle != 0.0:
        gray, mask = _warp(gray, mask, rot)
    steps.append(("rotate", {"degrees": angle}, rot))

    # 3. shrink, rows and columns independently
    sy, sx = (rng.uniform(*config.shrink_range, size=2) if on else (1.0, 1.0))
    shrink = _about_center(np.diag([sx, sy]), h, w)
    if (sy, sx) != (1.0, 1.0):
        gray, mask = _warp(gray, mask, shrink)
    steps.append(("shrink", {"rows": float(sy), "cols": float(sx)}, shrink))

    # 4. perspective: corners jittered by up to magnitude * side
    jitter = (rng.uniform(-1.0, 1.0, size=(4, 2)) * config.perspective_magnitude
              * np.array([w, h]) if on else np.zeros((4, 2)))
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
    persp = cv2.getPerspectiveTransform(src, (src + jitter).astype(np.float32)).astype(np.float64)
    if np.any(jitter):
        gray, mask = _warp(gray, mask, persp)
    steps.append(("perspective", {"corner_jitter": jitter.round(3).tolist()}, persp))

    # 5. flip
    flipped = bool(rng.random() < config.flip_prob) if on else False
    flip = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) if flipped else np.eye(3)
    if flipped:
        gray, mask = hflip(gray), hflip(mask)
    steps.append(("flip", {"flipped": flipped}, flip))

    # 6. crop2; column offset drawn in the unflipped frame so a flip mirrors the whole sample
    h2, w2 = config.crop2
    dy, dx = _crop(gray, mask, config.crop2, rng, on)
    if flipped:
        dx = w - w2 - dx
    gray, mask = gray[dy:dy + h2, dx:dx + w2], mask[dy:dy + h2, dx:dx + w2]
    steps.append(("crop2", {"offset": (dy, dx)}, _translation(dy, dx)))

    # 7-9. photometric, image only
    s = rng.uniform(*config.intensity_range) if on else 1.0
    x = normalize(gray, s)
    steps.append(("divide", {"divisor": INTENSITY_DIVISOR}, None))
    steps.append(("subtract_mean", {"mean": float(gray.mean(dtype=np.float64) / INTENSITY_DIVISOR)}, None))
    steps.append(("intensity", {"s": float(s)}, None))

    X = np.repeat(x[..., None], 3, axis=2).astype(np.float32)
    Y = target_from_mask(mask).astype(np.float32)
    log_steps = []
    if trace:
        for i, (name, params, matrix) in enumerate(steps, 1):
            entry = {"step": i, "name": name, **params}
            if matrix is not None:
                entry["matrix"] = matrix.tolist()
            log_steps.append(entry)
            log.debug("sample %s seed %d step %d %s %s", record.record_id, seed, i, name, params)
    return TrainingSample(X, Y, record.label, log_steps)


def composed_geometry(trace: list) -> np.ndarray:
    """Homography mapping original (x, y) pixel coordinates to the output crop."""
    m = np.eye(3)
    for entry in trace:
        if "matrix" in entry:
            m = np.asarray(entry["matrix"]) @ m
    return m
