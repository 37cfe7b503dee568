"""Gaussian heat-map targets built from bounding-box masks.

Every annotated box becomes an axis-aligned 2D Gaussian that peaks at 1 in
the box center and falls to 0.5 on the box boundary.  Targets are evaluated
directly on the stride-32 output grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

STRIDE = 32
BOUNDARY_RATIO = 0.5
MIN_HALF_EXTENT = 0.5


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel box at full input resolution."""

    r_min: int
    r_max: int
    c_min: int
    c_max: int

    def __post_init__(self):
        if self.r_min > self.r_max or self.c_min > self.c_max:
            raise ValueError(f"inverted box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.r_min + self.r_max) / 2.0, (self.c_min + self.c_max) / 2.0

    @property
    def area(self) -> int:
        return (self.r_max - self.r_min + 1) * (self.c_max - self.c_min + 1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.r_min, self.r_max, self.c_min, self.c_max


@dataclass(frozen=True)
class GaussianParams:
    r_mean: float
    c_mean: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("spread constants must be positive")


def boxes_from_mask(mask: np.ndarray) -> list[BoundingBox]:
    """One tight box per 4-connected nonzero component, in label order."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    labels, n = ndimage.label(mask != 0)
    boxes = []
    for sl in ndimage.find_objects(labels)[:n]:
        rows, cols = sl
        boxes.append(BoundingBox(rows.start, rows.stop - 1, cols.start, cols.stop - 1))
    return boxes


def gaussian_params(box: BoundingBox) -> GaussianParams:
    """Spread constants such that the amplitude is 0.5 on the box boundary.

    Half-extents under half a pixel are clamped to 0.5 so single-row or
    single-column boxes still give a finite Gaussian.
    """
    r_mean, c_mean = box.center
    half_r = max(r_mean - box.r_min, MIN_HALF_EXTENT)
    half_c = max(c_mean - box.c_min, MIN_HALF_EXTENT)
    ln_drop = -math.log(BOUNDARY_RATIO)
    return GaussianParams(r_mean, c_mean, half_r ** 2 / ln_drop, half_c ** 2 / ln_drop)


def evaluate_gaussian(params: GaussianParams, r, c):
    """Y(r, c) = exp(-(r - r_mean)^2 / a - (c - c_mean)^2 / b); broadcasts."""
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    out = np.exp(-((r - params.r_mean) ** 2) / params.a - ((c - params.c_mean) ** 2) / params.b)
    return float(out) if out.ndim == 0 else out


def cell_centers(n: int, stride: int = STRIDE) -> np.ndarray:
    """Input-pixel coordinates of the centers of ``n`` output cells."""
    return stride * np.arange(n, dtype=np.float64) + (stride - 1) / 2.0


def target_from_boxes(boxes, out_shape: tuple[int, int], stride: int = STRIDE) -> np.ndarray:
    """Per-pixel maximum of the boxes' Gaussians sampled at output-cell centers."""
    h, w = out_shape
    rr = cell_centers(h, stride)[:, None]
    cc = cell_centers(w, stride)[None, :]
    target = np.zeros((h, w), dtype=np.float64)
    for box in boxes:
        np.maximum(target, evaluate_gaussian(gaussian_params(box), rr, cc), out=target)
    return target


def target_from_mask(mask: np.ndarray, out_shape: tuple[int, int] | None = None,
                     stride: int = STRIDE) -> np.ndarray:
    """Heat-map target for a binary box mask at 1/stride resolution."""
    mask = np.asarray(mask)
    h, w = mask.shape[:2]
    if h % stride or w % stride:
        raise ValueError(f"mask shape {mask.shape} not divisible by {stride}")
    expected = (h // stride, w // stride)
    if out_shape is None:
        out_shape = expected
    elif tuple(out_shape) != expected:
        raise ValueError(f"out_shape {tuple(out_shape)} does not match {expected}")
    return target_from_boxes(boxes_from_mask(mask), out_shape, stride)
