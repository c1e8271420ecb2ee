"""Global-level language-to-visual distillation.

Pyramid feature maps are pooled into per-level patch grids, aggregated by a
parameter-free cosine cross attention with the caption embedding as the
query, scored against the caption, and trained with a symmetric batch
contrastive loss over all image-caption pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

POOLING_MODES = ("max", "average")
LOSS_VARIANTS = ("contrastive", "positive-only")


@dataclass(frozen=True)
class GkdConfig:
    enabled: bool = True
    grid: int = 3
    pooling: str = "max"
    loss: str = "contrastive"
    weight: float = 0.1

    def __post_init__(self) -> None:
        if self.grid < 1:
            raise ValueError("patch grid must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}")


@dataclass
class PatchFeatureSet:
    """Pooled patch features for one image: levels * grid**2 rows."""

    features: torch.Tensor  # (levels * grid**2, d)
    levels: int
    grid: int

    def __post_init__(self) -> None:
        expected = self.levels * self.grid * self.grid
        if self.features.shape[0] != expected:
            raise ValueError(
                f"expected {expected} patch features, got {self.features.shape[0]}"
            )


def _cell_bounds(extent: int, grid: int) -> list[tuple[int, int]]:
    """Near-equal partition of `extent` into `grid` cells; extents smaller
    than the grid replicate boundary cells so the count is always `grid`."""
    bounds = []
    for k in range(grid):
        start = (k * extent) // grid
        end = ((k + 1) * extent) // grid
        start = min(start, extent - 1)
        if end <= start:
            end = start + 1
        bounds.append((start, end))
    return bounds


def pool_patches(
    maps: Sequence[torch.Tensor],
    grid: int,
    mode: str = "max",
) -> PatchFeatureSet:
    """Pool each (d, H, W) level into a grid x grid set of channelwise
    max (or mean) patch vectors."""
    if mode not in POOLING_MODES:
        raise ValueError(f"mode must be one of {POOLING_MODES}")
    rows = []
    for level_map in maps:
        if level_map.ndim != 3:
            raise ValueError(f"expected (d, H, W) map, got {tuple(level_map.shape)}")
        h, w = int(level_map.shape[1]), int(level_map.shape[2])
        for y0, y1 in _cell_bounds(h, grid):
            for x0, x1 in _cell_bounds(w, grid):
                cell = level_map[:, y0:y1, x0:x1]
                if mode == "max":
                    rows.append(cell.amax(dim=(1, 2)))
                else:
                    rows.append(cell.mean(dim=(1, 2)))
    return PatchFeatureSet(features=torch.stack(rows), levels=len(maps), grid=grid)


def cross_attention(
    caption_embedding: torch.Tensor,
    patches: PatchFeatureSet | torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Aggregate patch features with softmax-normalized cosine responses to
    the caption query. Returns (aggregated vector, weights)."""
    feats = patches.features if isinstance(patches, PatchFeatureSet) else patches
    cap_norm = caption_embedding.norm()
    if float(cap_norm.detach()) == 0.0:
        raise ValueError("caption embedding must be nonzero")
    patch_norms = feats.norm(dim=-1)
    safe = patch_norms.clamp_min(1e-30)
    cos = (feats @ caption_embedding) / (safe * cap_norm)
    cos = torch.where(patch_norms > 0, cos, torch.zeros_like(cos))
    weights = F.softmax(cos, dim=0)
    return weights @ feats, weights


def matching_score(aggregated: torch.Tensor, caption_embedding: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between the caption-aware aggregation and the caption."""
    na = aggregated.norm()
    nc = caption_embedding.norm()
    if float(na.detach()) == 0.0 or float(nc.detach()) == 0.0:
        raise ValueError("matching score undefined for zero vectors")
    return (aggregated @ caption_embedding) / (na * nc)


def global_contrastive_loss(
    scores: torch.Tensor,
    tau_m: torch.Tensor | float,
    variant: str = "contrastive",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Symmetric contrastive loss over a (b, b) matching-score matrix whose
    diagonal holds the positive pairs.

    The positive-only variant returns (mean(1 - diagonal), 0) and ignores all
    off-diagonal entries.
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"variant must be one of {LOSS_VARIANTS}")
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"expected a square score matrix, got {tuple(scores.shape)}")
    b = scores.shape[0]
    if b == 0:
        raise ValueError("empty batch: contrastive loss needs at least one pair")
    diag = scores.diagonal()
    if variant == "positive-only":
        return (1.0 - diag).mean(), scores.new_zeros(())
    logits = scores * tau_m
    loss_image = (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()
    loss_caption = (torch.logsumexp(logits, dim=0) - logits.diagonal()).mean()
    return loss_image, loss_caption


def pairwise_matching_scores(
    patch_sets: Sequence[PatchFeatureSet],
    caption_embeddings: torch.Tensor,
) -> torch.Tensor:
    """All image x caption matching scores. The aggregation is conditioned on
    the caption, so every off-diagonal entry needs its own cross attention."""
    b = len(patch_sets)
    if caption_embeddings.shape[0] != b:
        raise ValueError("need one caption embedding per image")
    rows = []
    for p in range(b):
        row = []
        for q in range(b):
            aggregated, _ = cross_attention(caption_embeddings[q], patch_sets[p])
            row.append(matching_score(aggregated, caption_embeddings[q]))
        rows.append(torch.stack(row))
    return torch.stack(rows)
