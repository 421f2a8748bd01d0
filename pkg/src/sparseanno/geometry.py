"""Axis-aligned box arithmetic.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` with a continuous
area convention (no ``+1`` pixel correction).  Scalar functions operate on
:class:`Box`; the ``pairwise_*`` functions are the vectorized counterparts
used by the assignment code and evaluate the exact same float expressions,
so thresholded comparisons agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def clip(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x_min, 0.0), width)
        y1 = min(max(self.y_min, 0.0), height)
        x2 = min(max(self.x_max, 0.0), width)
        y2 = min(max(self.y_max, 0.0), height)
        return Box(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


def area(b: Box) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection_area(b1: Box, b2: Box) -> float:
    iw = min(b1.x_max, b2.x_max) - max(b1.x_min, b2.x_min)
    ih = min(b1.y_max, b2.y_max) - max(b1.y_min, b2.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(b1: Box, b2: Box) -> float:
    inter = intersection_area(b1, b2)
    a1 = area(b1)
    a2 = area(b2)
    # (a1 + a2) keeps iou bit-symmetric; max() keeps union >= either area under rounding
    union = max((a1 + a2) - inter, a1, a2)
    if union <= 0.0:
        return 0.0
    return inter / union


def aiou(b1: Box, b2: Box) -> float:
    """Fraction of ``b1`` covered by ``b2``; 0 for a zero-area ``b1``."""
    a1 = area(b1)
    if a1 <= 0.0:
        return 0.0
    return intersection_area(b1, b2) / a1


def as_array(boxes: Iterable[Box] | np.ndarray) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` float64 array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64, copy=False)
    rows = [(b.x_min, b.y_min, b.x_max, b.y_max) for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def _areas(a: np.ndarray) -> np.ndarray:
    return (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])


def _pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    ok = (iw > 0.0) & (ih > 0.0)
    return np.where(ok, iw * ih, 0.0)


def pairwise_iou(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = as_array(a)
    b = as_array(b)
    inter = _pairwise_intersection(a, b)
    a1 = _areas(a)[:, None]
    a2 = _areas(b)[None, :]
    union = np.maximum(np.maximum((a1 + a2) - inter, a1), a2)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def pairwise_aiou(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Asymmetric IoU matrix: entry ``(i, j)`` is ``aiou(a[i], b[j])``."""
    a = as_array(a)
    b = as_array(b)
    inter = _pairwise_intersection(a, b)
    a1 = np.broadcast_to(_areas(a)[:, None], inter.shape)
    out = np.zeros_like(inter)
    np.divide(inter, a1, out=out, where=a1 > 0.0)
    return out
