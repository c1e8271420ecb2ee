"""Axis-aligned box arithmetic, region crops, and non-maximum suppression.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates, origin at the
top-left corner of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


class InvalidCropError(ValueError):
    """Raised when a requested crop does not intersect the image."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    """A scored, categorized box. `category` is a dataset category id."""

    box: Box
    category: int
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for degenerate boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between (N, 4) and (M, 4) arrays of xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    out[inter <= 0.0] = 0.0
    return out


def expand_box(b: Box, factor: float, bounds: tuple[float, float]) -> Box:
    """Scale a box about its center by `factor`, then clip to `bounds` (W, H)."""
    if factor < 1.0:
        raise ValueError(f"expansion factor must be >= 1, got {factor}")
    cx, cy = b.center
    hw = b.width * factor / 2.0
    hh = b.height * factor / 2.0
    width, height = bounds
    return Box(
        max(cx - hw, 0.0),
        max(cy - hh, 0.0),
        min(cx + hw, float(width)),
        min(cy + hh, float(height)),
    )


def clip_box(b: Box, width: float, height: float) -> Box:
    return Box(
        min(max(b.x1, 0.0), float(width)),
        min(max(b.y1, 0.0), float(height)),
        min(max(b.x2, 0.0), float(width)),
        min(max(b.y2, 0.0), float(height)),
    )


def crop_resize_long_side_pad(image: np.ndarray, box: Box, target: int = 224) -> np.ndarray:
    """Crop `box` from an HxWxC image, scale its long side to `target`
    (bilinear, aspect preserved) and zero-pad bottom/right to target x target.

    Returns a float32 array of shape (target, target, C).
    """
    if target <= 0:
        raise ValueError(f"target side must be positive, got {target}")
    if image.ndim != 3:
        raise ValueError(f"expected HxWxC image, got shape {image.shape}")
    img_h, img_w = image.shape[:2]
    x1 = max(int(math.floor(box.x1)), 0)
    y1 = max(int(math.floor(box.y1)), 0)
    x2 = min(int(math.ceil(box.x2)), img_w)
    y2 = min(int(math.ceil(box.y2)), img_h)
    if x2 <= x1 or y2 <= y1:
        raise InvalidCropError(f"box {box} does not intersect image {img_w}x{img_h}")
    crop = np.asarray(image[y1:y2, x1:x2], dtype=np.float32)
    h, w = crop.shape[:2]
    if w >= h:
        new_w = target
        new_h = max(1, round(h * target / w))
    else:
        new_h = target
        new_w = max(1, round(w * target / h))
    t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    out = np.zeros((target, target, crop.shape[2]), dtype=np.float32)
    out[:new_h, :new_w] = resized.squeeze(0).permute(1, 2, 0).numpy()
    return out


def _nms_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].category, dets[i].box.x1),
    )


def nms(dets: Sequence[Detection], iou_threshold: float = 0.4) -> list[Detection]:
    """Greedy class-wise suppression by descending score.

    Ties break by (score desc, category asc, x1 asc). Two kept detections of
    the same category never overlap by more than `iou_threshold`.
    """
    kept: list[Detection] = []
    kept_boxes: dict[int, list[np.ndarray]] = {}
    for i in _nms_order(dets):
        d = dets[i]
        same_cat = kept_boxes.get(d.category)
        if same_cat:
            overlaps = iou_matrix(d.box.as_array(), np.stack(same_cat))[0]
            if bool((overlaps > iou_threshold).any()):
                continue
        kept.append(d)
        kept_boxes.setdefault(d.category, []).append(d.box.as_array())
    return kept
