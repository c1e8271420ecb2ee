"""Instance-level visual distillation: align positive-anchor features with
teacher embeddings of cropped regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .detector import SampleAssignment
from .geometry import Box
from .teacher import Teacher, encode_region

NORMS = ("l1", "l2")
CROP_SOURCES = ("predicted", "ground-truth")


@dataclass(frozen=True)
class IkdConfig:
    enabled: bool = True
    norm: str = "l1"
    weight: float = 1.0
    crop_source: str = "predicted"
    expansion: float = 1.5
    iou_threshold: float = 0.5
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.crop_source not in CROP_SOURCES:
            raise ValueError(f"crop_source must be one of {CROP_SOURCES}")
        if not 0.0 <= self.iou_threshold < 1.0 + 1e-12:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if self.weight <= 0.0:
            raise ValueError("weight must be positive")
        if self.expansion < 1.0:
            raise ValueError("expansion factor must be >= 1")


def select_distill_points(
    assignment: SampleAssignment,
    boxes: np.ndarray,
    threshold: float,
    image_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Indices of positives kept for distillation, in anchor order.

    A positive survives when its anchor IOU with the matched ground truth is
    at least `threshold` and, when `image_size` (W, H) is given, its crop box
    still intersects the image.
    """
    pos = assignment.positive_indices()
    keep = assignment.ious[pos] >= threshold
    if image_size is not None:
        w, h = image_size
        b = np.asarray(boxes, dtype=np.float64)[pos]
        intersects = (
            (np.minimum(b[:, 2], w) > np.maximum(b[:, 0], 0.0))
            & (np.minimum(b[:, 3], h) > np.maximum(b[:, 1], 0.0))
        )
        keep &= intersects
    return pos[keep]


def region_targets(
    image: np.ndarray,
    boxes: np.ndarray,
    expansion: float,
    teacher: Teacher,
) -> np.ndarray:
    """Teacher embeddings for a set of crop boxes, memoized within the call."""
    cache: dict[tuple[float, float, float, float], np.ndarray] = {}
    out = np.zeros((len(boxes), teacher.dim), dtype=np.float32)
    for i, row in enumerate(np.asarray(boxes, dtype=np.float64)):
        key = tuple(np.round(row, 3))
        if key not in cache:
            cache[key] = encode_region(image, Box.from_array(row), expansion, teacher)
        out[i] = cache[key]
    return out


def ikd_loss(
    student: torch.Tensor,
    targets: torch.Tensor,
    norm: str = "l1",
) -> torch.Tensor:
    """Mean elementwise-norm distance between L2-normalized feature pairs.

    Targets carry no gradient. Empty input gives an exact zero with no
    gradient; a zero-norm student feature is an error (dead feature).
    """
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}")
    if student.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(student.shape)} vs {tuple(targets.shape)}")
    if student.shape[0] == 0:
        return student.new_zeros(())
    student_norms = student.norm(dim=-1, keepdim=True)
    if bool((student_norms == 0).any()):
        raise ValueError("zero-norm student feature (dead feature)")
    targets = targets.detach()
    target_norms = targets.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    diff = student / student_norms - targets / target_norms
    if norm == "l1":
        per_pair = diff.abs().sum(dim=-1)
    else:
        per_pair = diff.norm(dim=-1)
    return per_pair.mean()
