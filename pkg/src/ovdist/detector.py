"""One-stage student detector.

A small configurable convolutional backbone feeds a 5-level feature pyramid
with one anchor per location. Classification is embedding similarity against
category text embeddings plus a trainable background embedding; regression
predicts center-to-side distances; an IOU branch predicts localization
quality. Sample assignment follows the adaptive top-k / mean-plus-std rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import iou_matrix

NEGATIVE_SAMPLING_STRATEGIES = ("1:1", "10%", "all")


@dataclass(frozen=True)
class DetectorConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    levels: int = 5
    base_stride: int = 8
    anchor_scales: tuple[float, ...] = (2.0,)
    feature_dim: int = 512
    negative_sampling: str = "10%"
    use_iou_branch: bool = True
    tower_depth: int = 2
    assign_top_k: int = 9

    def __post_init__(self) -> None:
        if len(self.widths) != 4:
            raise ValueError(f"backbone needs 4 stage widths, got {self.widths}")
        if self.levels < 2:
            raise ValueError("need at least two pyramid levels")
        scales = self.anchor_scales
        if len(scales) == 1:
            scales = scales * self.levels
            object.__setattr__(self, "anchor_scales", scales)
        if len(scales) != self.levels:
            raise ValueError(f"{self.levels} levels but {len(scales)} anchor scales")
        if self.feature_dim % 8 != 0:
            raise ValueError("feature_dim must be divisible by 8 (group norm groups)")
        if self.negative_sampling not in NEGATIVE_SAMPLING_STRATEGIES:
            raise ValueError(f"negative_sampling must be one of {NEGATIVE_SAMPLING_STRATEGIES}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.base_stride * 2**i for i in range(self.levels))


@dataclass(frozen=True)
class AnchorLayout:
    """Per-level anchor grids flattened level-major, row-major within a level."""

    strides: tuple[int, ...]
    grids: tuple[tuple[int, int], ...]
    centers: np.ndarray  # (N, 2) float64
    boxes: np.ndarray  # (N, 4) float64
    level_slices: tuple[slice, ...]

    @property
    def count(self) -> int:
        return int(self.centers.shape[0])


def build_anchor_layout(
    grids: Sequence[tuple[int, int]],
    strides: Sequence[int],
    scales: Sequence[float],
) -> AnchorLayout:
    centers, boxes, slices = [], [], []
    offset = 0
    for (h, w), stride, scale in zip(grids, strides, scales):
        ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
        xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        c = np.stack([cx.ravel(), cy.ravel()], axis=1)
        half = scale * stride / 2.0
        b = np.concatenate([c - half, c + half], axis=1)
        centers.append(c)
        boxes.append(b)
        slices.append(slice(offset, offset + h * w))
        offset += h * w
    return AnchorLayout(
        strides=tuple(strides),
        grids=tuple((int(h), int(w)) for h, w in grids),
        centers=np.concatenate(centers, axis=0),
        boxes=np.concatenate(boxes, axis=0),
        level_slices=tuple(slices),
    )


def _conv_gn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class DetectorOutputs:
    feature_maps: list[torch.Tensor]  # per level (B, d, H_l, W_l)
    anchor_features: torch.Tensor  # (B, N, d)
    boxes: torch.Tensor  # (B, N, 4) decoded, unclipped
    iou_pred: torch.Tensor  # (B, N) in (0, 1)
    layout: AnchorLayout


class OneStageDetector(nn.Module):
    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        self.config = config
        w = config.widths
        d = config.feature_dim
        self.stage1 = _conv_gn_relu(3, w[0], stride=2)
        self.stage2 = _conv_gn_relu(w[0], w[1], stride=2)
        self.stage3 = nn.Sequential(_conv_gn_relu(w[1], w[2], stride=2), _conv_gn_relu(w[2], w[2]))
        self.stage4 = nn.Sequential(_conv_gn_relu(w[2], w[3], stride=2), _conv_gn_relu(w[3], w[3]))
        self.lateral3 = nn.Conv2d(w[2], d, 1)
        self.lateral4 = nn.Conv2d(w[3], d, 1)
        self.smooth3 = nn.Conv2d(d, d, 3, padding=1)
        self.smooth4 = nn.Conv2d(d, d, 3, padding=1)
        self.extra = nn.ModuleList(
            [nn.Conv2d(d, d, 3, stride=2, padding=1) for _ in range(config.levels - 2)]
        )
        self.cls_tower = nn.Sequential(*[_conv_gn_relu(d, d) for _ in range(config.tower_depth)])
        self.reg_tower = nn.Sequential(*[_conv_gn_relu(d, d) for _ in range(config.tower_depth)])
        self.reg_head = nn.Conv2d(d, 4, 3, padding=1)
        self.iou_head = nn.Conv2d(d, 1, 3, padding=1)
        # per-level multiplier on predicted side distances
        self.reg_scales = nn.Parameter(torch.ones(config.levels))
        # keep initial similarity logits small: tau_c starts at 100, so the
        # classification feature must start near zero norm to avoid a
        # saturated softmax
        self.cls_gain = nn.Parameter(torch.tensor(0.05))
        nn.init.constant_(self.reg_head.bias, 0.0)
        self._layout_cache: dict[tuple[int, int], AnchorLayout] = {}

    def anchor_layout(self, height: int, width: int) -> AnchorLayout:
        key = (height, width)
        if key not in self._layout_cache:
            grids = []
            for stride in self.config.strides:
                grids.append((-(-height // stride), -(-width // stride)))
            self._layout_cache[key] = build_anchor_layout(
                grids, self.config.strides, self.config.anchor_scales
            )
        return self._layout_cache[key]

    def _pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        c1 = self.stage1(images)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        p4 = self.lateral4(c4)
        p3 = self.lateral3(c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        maps = [self.smooth3(p3), self.smooth4(p4)]
        for conv in self.extra:
            maps.append(conv(maps[-1]))
        return maps

    def forward(self, images: torch.Tensor) -> DetectorOutputs:
        if images.ndim != 4:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        height, width = int(images.shape[2]), int(images.shape[3])
        layout = self.anchor_layout(height, width)
        maps = self._pyramid(images)
        feats, dists, ious = [], [], []
        for level, p in enumerate(maps):
            cls_feat = self.cls_gain * (p + self.cls_tower(p))
            reg_feat = self.reg_tower(p)
            raw = self.reg_head(reg_feat)
            stride = self.config.strides[level]
            dist = F.softplus(self.reg_scales[level] * raw) * (2.0 * stride)
            iou_logit = self.iou_head(reg_feat)
            b = p.shape[0]
            feats.append(cls_feat.permute(0, 2, 3, 1).reshape(b, -1, cls_feat.shape[1]))
            dists.append(dist.permute(0, 2, 3, 1).reshape(b, -1, 4))
            ious.append(torch.sigmoid(iou_logit).permute(0, 2, 3, 1).reshape(b, -1))
        anchor_features = torch.cat(feats, dim=1)
        dist_all = torch.cat(dists, dim=1)
        iou_pred = torch.cat(ious, dim=1)
        centers = torch.as_tensor(layout.centers, dtype=images.dtype, device=images.device)
        boxes = torch.stack(
            [
                centers[:, 0] - dist_all[..., 0],
                centers[:, 1] - dist_all[..., 1],
                centers[:, 0] + dist_all[..., 2],
                centers[:, 1] + dist_all[..., 3],
            ],
            dim=-1,
        )
        for name, t in (("features", anchor_features), ("boxes", boxes), ("iou", iou_pred)):
            if not torch.isfinite(t).all():
                raise RuntimeError(f"non-finite detector activations in {name}")
        return DetectorOutputs(
            feature_maps=maps,
            anchor_features=anchor_features,
            boxes=boxes,
            iou_pred=iou_pred,
            layout=layout,
        )


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 uint8 images into a (B, 3, H, W) float tensor in [0, 1],
    zero-padding bottom/right to the largest extent in the batch."""
    h = max(im.shape[0] for im in images)
    w = max(im.shape[1] for im in images)
    out = torch.zeros(len(images), 3, h, w, dtype=torch.float32)
    for i, im in enumerate(images):
        t = torch.from_numpy(np.array(im, copy=True)).permute(2, 0, 1).float() / 255.0
        out[i, :, : im.shape[0], : im.shape[1]] = t
    return out


def classify(
    features: torch.Tensor,
    table: torch.Tensor,
    background: torch.Tensor,
    tau_c: torch.Tensor | float,
) -> torch.Tensor:
    """Softmax over temperature-scaled similarities with the category table
    and the background embedding (last column)."""
    if features.shape[-1] != table.shape[-1] or features.shape[-1] != background.shape[-1]:
        raise ValueError(
            f"feature dim {features.shape[-1]} does not match table dim {table.shape[-1]}"
        )
    logits = features @ table.T
    bg = (features * background).sum(-1, keepdim=True)
    return F.softmax(torch.cat([logits, bg], dim=-1) * tau_c, dim=-1)


def softmax_focal_loss(
    probs: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0
) -> torch.Tensor:
    """Per-sample focal term -(1 - p_y)^gamma * log(p_y)."""
    p_y = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -((1.0 - p_y) ** gamma) * torch.log(p_y.clamp_min(1e-12))


@dataclass(frozen=True)
class SampleAssignment:
    """Per-anchor assignment: labels hold the matched category id or -1 for
    background; `ious` is the anchor-box IOU with the matched ground truth."""

    labels: np.ndarray  # (N,) int64, -1 = background
    matched_gt: np.ndarray  # (N,) int64, -1 = none
    ious: np.ndarray  # (N,) float64
    n_pos: int
    n_total: int

    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.matched_gt >= 0)[0]


def assign_samples(
    layout: AnchorLayout,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    top_k: int = 9,
) -> SampleAssignment:
    """Adaptive assignment: per ground truth take the `top_k` closest anchors
    per level by center distance, threshold candidate IOUs at mean + std, and
    keep candidates above threshold whose center lies inside the box. Anchors
    claimed by several ground truths go to the one with the highest IOU."""
    n = layout.count
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    ious_out = np.zeros(n, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    g = gt_boxes.shape[0]
    if g == 0:
        return SampleAssignment(labels, matched, ious_out, n_pos=0, n_total=n)

    overlaps = iou_matrix(layout.boxes, gt_boxes)  # (N, G)
    gt_centers = (gt_boxes[:, :2] + gt_boxes[:, 2:]) / 2.0
    diff = layout.centers[:, None, :] - gt_centers[None, :, :]
    distances = np.sqrt((diff**2).sum(-1))  # (N, G)

    candidate_rows = []
    for slc in layout.level_slices:
        k = min(top_k, slc.stop - slc.start)
        order = np.argsort(distances[slc], axis=0, kind="stable")[:k]
        candidate_rows.append(order + slc.start)
    candidates = np.concatenate(candidate_rows, axis=0)  # (K, G)

    best_iou = np.full(n, -1.0)
    for j in range(g):
        cand = candidates[:, j]
        cand_ious = overlaps[cand, j]
        mean = cand_ious.mean()
        std = cand_ious.std(ddof=1) if cand_ious.size > 1 else 0.0
        threshold = mean + std
        cx, cy = layout.centers[cand, 0], layout.centers[cand, 1]
        inside = (
            (cx >= gt_boxes[j, 0])
            & (cx <= gt_boxes[j, 2])
            & (cy >= gt_boxes[j, 1])
            & (cy <= gt_boxes[j, 3])
        )
        keep = cand[(cand_ious >= threshold) & inside]
        for a in keep:
            if overlaps[a, j] > best_iou[a]:
                best_iou[a] = overlaps[a, j]
                matched[a] = j
                labels[a] = gt_labels[j]
                ious_out[a] = overlaps[a, j]
    n_pos = int((matched >= 0).sum())
    return SampleAssignment(labels, matched, ious_out, n_pos=n_pos, n_total=n)


def sample_negatives(
    assignment: SampleAssignment,
    strategy: str,
    rng: np.random.Generator | int,
) -> np.ndarray:
    """Boolean keep-mask over anchors. Positives are always kept; negatives
    follow the strategy: "1:1" keeps min(n_pos, #neg), "10%" keeps
    ceil(0.1 * #neg), "all" keeps everything."""
    if strategy not in NEGATIVE_SAMPLING_STRATEGIES:
        raise ValueError(f"unknown negative sampling strategy {strategy!r}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    pos = assignment.matched_gt >= 0
    mask = pos.copy()
    neg_indices = np.nonzero(~pos)[0]
    if strategy == "all":
        keep = neg_indices
    elif strategy == "1:1":
        count = min(assignment.n_pos, neg_indices.size)
        keep = rng.choice(neg_indices, size=count, replace=False)
    else:  # "10%"
        count = min(int(np.ceil(0.1 * neg_indices.size)), neg_indices.size)
        keep = rng.choice(neg_indices, size=count, replace=False)
    mask[keep] = True
    return mask


def classification_loss(
    probs: torch.Tensor,
    labels: torch.Tensor,
    keep_mask: torch.Tensor,
    n_pos: int,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Focal loss summed over kept anchors, normalized by the positive count
    (clamped to one when there are no positives)."""
    terms = softmax_focal_loss(probs[keep_mask], labels[keep_mask], gamma=gamma)
    return terms.sum() / max(n_pos, 1)


def giou_pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise generalized IOU of (M, 4) box tensors."""
    ix = torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])
    iy = torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])
    inter = ix.clamp_min(0) * iy.clamp_min(0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    iou_v = inter / union.clamp_min(1e-12)
    ex = torch.maximum(a[:, 2], b[:, 2]) - torch.minimum(a[:, 0], b[:, 0])
    ey = torch.maximum(a[:, 3], b[:, 3]) - torch.minimum(a[:, 1], b[:, 1])
    enclosure = (ex * ey).clamp_min(1e-12)
    return iou_v - (enclosure - union) / enclosure


def localization_loss(
    pred_boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    pos_mask: torch.Tensor,
) -> torch.Tensor:
    """Mean (1 - GIoU) over positive anchors; zero without positives."""
    if not bool(pos_mask.any()):
        return pred_boxes.new_zeros(())
    return (1.0 - giou_pairwise(pred_boxes[pos_mask], target_boxes[pos_mask])).mean()


def iou_branch_loss(
    iou_pred: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    pos_mask: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy between the predicted IOU and the actual IOU of
    the decoded box with its matched ground truth, over positives."""
    if not bool(pos_mask.any()):
        return iou_pred.new_zeros(())
    with torch.no_grad():
        a = pred_boxes[pos_mask]
        b = target_boxes[pos_mask]
        ix = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp_min(0)
        iy = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp_min(0)
        inter = ix * iy
        area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])).clamp_min(0)
        area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        target = inter / (area_a + area_b - inter).clamp_min(1e-12)
        target = target.clamp(0.0, 1.0)
    p = iou_pred[pos_mask].clamp(1e-12, 1.0 - 1e-12)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
