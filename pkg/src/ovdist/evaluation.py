"""Detection metrics: AP at IOU 0.5, recall at a detection budget, size
buckets, and base/novel/all aggregation into an evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Annotation, SplitSpec
from .geometry import Detection, iou

SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2
AREA_BUCKETS = {
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, MEDIUM_AREA),
    "large": (MEDIUM_AREA, float("inf")),
}


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.category, d.box.x1))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    iou_threshold: float = 0.5,
    category_agnostic: bool = False,
) -> tuple[list[bool], list[bool]]:
    """Greedy matching in score order: each detection takes the highest-IOU
    unmatched same-category ground truth at or above the threshold.

    Returns (per-detection true-positive flags in the sorted detection order,
    per-ground-truth matched flags).
    """
    ordered = _sorted_dets(dets)
    gt_matched = [False] * len(gts)
    flags = []
    for d in ordered:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if gt_matched[j]:
                continue
            if not category_agnostic and g.category_id != d.category:
                continue
            value = iou(d.box, g.box)
            if value >= iou_threshold and value > best_iou:
                best, best_iou = j, value
        if best >= 0:
            gt_matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, gt_matched


def average_precision(
    flags: Sequence[bool], scores: Sequence[float], total_gt: int
) -> float:
    """Area under the right-smoothed precision-recall curve (all-point
    interpolation). Zero whenever there is nothing to recall."""
    if total_gt < 0:
        raise ValueError("total_gt must be >= 0")
    if total_gt == 0 or len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    flags_sorted = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(flags_sorted)
    fp = np.cumsum(~flags_sorted)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # sum the envelope precision at each new true positive, divide once
    return float(envelope[flags_sorted].sum() / total_gt)


def recall_at(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[Annotation]],
    budget: int,
    iou_threshold: float = 0.5,
    category_agnostic: bool = True,
) -> float:
    """Fraction of ground truths matched using at most `budget` top-scoring
    detections per image."""
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    matched = 0
    total = 0
    for image_id, gts in gts_by_image.items():
        total += len(gts)
        dets = _sorted_dets(dets_by_image.get(image_id, ()))[:budget]
        _, gt_matched = match_detections(
            dets, gts, iou_threshold, category_agnostic=category_agnostic
        )
        matched += sum(gt_matched)
    if total == 0:
        return 0.0
    return matched / total


def _category_ap(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[Annotation]],
    category_id: int,
    iou_threshold: float,
) -> tuple[float, int]:
    flags: list[bool] = []
    scores: list[float] = []
    total_gt = 0
    for image_id, gts in gts_by_image.items():
        cat_gts = [g for g in gts if g.category_id == category_id]
        total_gt += len(cat_gts)
        cat_dets = _sorted_dets(
            [d for d in dets_by_image.get(image_id, ()) if d.category == category_id]
        )
        image_flags, _ = match_detections(cat_dets, cat_gts, iou_threshold)
        flags.extend(image_flags)
        scores.extend(d.score for d in cat_dets)
    return average_precision(flags, scores, total_gt), total_gt


def size_bucketed_ap(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[Annotation]],
    category_ids: Sequence[int],
    iou_threshold: float = 0.5,
) -> dict[str, float | None]:
    """AP restricted to ground truths inside each area bucket, averaged over
    categories. Ground truths outside the bucket are ignored together with
    the detections matched to them; unmatched detections count as false
    positives only when their own area falls in the bucket. Buckets with no
    ground truths anywhere report None."""
    out: dict[str, float | None] = {}
    for bucket, (lo, hi) in AREA_BUCKETS.items():
        per_category: list[float] = []
        any_gts = False
        for cid in category_ids:
            flags: list[bool] = []
            scores: list[float] = []
            total_gt = 0
            for image_id, gts in gts_by_image.items():
                cat_gts = [g for g in gts if g.category_id == cid]
                in_bucket = [lo <= g.box.area < hi for g in cat_gts]
                total_gt += sum(in_bucket)
                cat_dets = _sorted_dets(
                    [d for d in dets_by_image.get(image_id, ()) if d.category == cid]
                )
                gt_matched = [False] * len(cat_gts)
                for d in cat_dets:
                    best, best_iou = -1, 0.0
                    for j, g in enumerate(cat_gts):
                        if gt_matched[j]:
                            continue
                        value = iou(d.box, g.box)
                        if value >= iou_threshold and value > best_iou:
                            best, best_iou = j, value
                    if best >= 0:
                        gt_matched[best] = True
                        if in_bucket[best]:
                            flags.append(True)
                            scores.append(d.score)
                        # matched to an out-of-bucket gt: ignored
                    elif lo <= d.box.area < hi:
                        flags.append(False)
                        scores.append(d.score)
            if total_gt > 0:
                any_gts = True
                per_category.append(average_precision(flags, scores, total_gt))
        out[bucket] = float(np.mean(per_category)) if any_gts else None
    return out


@dataclass
class EvalReport:
    mode: str
    per_category_ap: dict[str, float]
    mean_ap_base: float | None
    mean_ap_novel: float | None
    mean_ap_all: float
    recall: dict[int, float]
    size_ap_novel: dict[str, float | None]
    image_count: int
    instance_count: int
    config_hash: str = ""
    seed: int | None = None

    def to_keyvalue_lines(self) -> list[str]:
        def fmt(v: float | None) -> str:
            return "NA" if v is None else f"{v:.6f}"

        lines = [
            f"config_hash={self.config_hash}",
            f"seed={self.seed}",
            f"mode={self.mode}",
            f"images={self.image_count}",
            f"instances={self.instance_count}",
            f"map50.base={fmt(self.mean_ap_base)}",
            f"map50.novel={fmt(self.mean_ap_novel)}",
            f"map50.all={fmt(self.mean_ap_all)}",
        ]
        for budget in sorted(self.recall):
            lines.append(f"ar{budget}={fmt(self.recall[budget])}")
        for bucket in ("small", "medium", "large"):
            lines.append(f"ap_{bucket}.novel={fmt(self.size_ap_novel.get(bucket))}")
        for name in self.per_category_ap:
            key = name.replace(" ", "_")
            lines.append(f"ap50.{key}={fmt(self.per_category_ap[name])}")
        return lines

    def to_table(self) -> str:
        def fmt(v: float | None) -> str:
            return "   -  " if v is None else f"{100 * v:6.2f}"

        width = max([len(n) for n in self.per_category_ap] + [12])
        rows = [
            f"{'category':<{width}}  AP50(%)",
            "-" * (width + 9),
        ]
        for name, ap in self.per_category_ap.items():
            rows.append(f"{name:<{width}}  {fmt(ap)}")
        rows.append("-" * (width + 9))
        rows.append(f"{'mean base':<{width}}  {fmt(self.mean_ap_base)}")
        rows.append(f"{'mean novel':<{width}}  {fmt(self.mean_ap_novel)}")
        rows.append(f"{'mean all':<{width}}  {fmt(self.mean_ap_all)}")
        for budget in sorted(self.recall):
            rows.append(f"{f'AR@{budget}':<{width}}  {fmt(self.recall[budget])}")
        for bucket in ("small", "medium", "large"):
            rows.append(
                f"{f'AP_{bucket[0].upper()} novel':<{width}}  "
                f"{fmt(self.size_ap_novel.get(bucket))}"
            )
        return "\n".join(rows)

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        kv_path = out / "report.kv"
        kv_path.write_text("\n".join(self.to_keyvalue_lines()) + "\n")
        table_path = out / "report.txt"
        table_path.write_text(self.to_table() + "\n")
        return kv_path, table_path


def evaluate_detections(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[Annotation]],
    split: SplitSpec,
    name_to_id: Mapping[str, int],
    mode: str,
    iou_threshold: float = 0.5,
    recall_budgets: Sequence[int] = (100,),
    class_agnostic_recall: bool = True,
    config_hash: str = "",
    seed: int | None = None,
) -> EvalReport:
    """Score detections against ground truth under one vocabulary protocol.

    The active category set follows the mode (zsd: novel, gzsd: base + novel,
    base: base); ground truths outside the active set are dropped before
    matching, mirroring the protocol's vocabulary restriction.
    """
    if mode == "zsd":
        active = list(split.novel)
    elif mode == "gzsd":
        active = list(split.base) + list(split.novel)
    elif mode == "base":
        active = list(split.base)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    active_ids = {name_to_id[n] for n in active}
    gts = {
        img: [g for g in anns if g.category_id in active_ids]
        for img, anns in gts_by_image.items()
    }

    per_category: dict[str, float] = {}
    for name in active:
        ap, _ = _category_ap(dets_by_image, gts, name_to_id[name], iou_threshold)
        per_category[name] = ap

    def mean_over(names: Sequence[str]) -> float | None:
        values = [per_category[n] for n in names if n in per_category]
        return float(np.mean(values)) if values else None

    novel_ids = [name_to_id[n] for n in split.novel if n in active]
    report = EvalReport(
        mode=mode,
        per_category_ap=per_category,
        mean_ap_base=mean_over(split.base) if mode != "zsd" else None,
        mean_ap_novel=mean_over(split.novel) if mode != "base" else None,
        mean_ap_all=float(np.mean(list(per_category.values()))),
        recall={
            b: recall_at(dets_by_image, gts, b, iou_threshold, class_agnostic_recall)
            for b in recall_budgets
        },
        size_ap_novel=(
            size_bucketed_ap(dets_by_image, gts, novel_ids, iou_threshold)
            if novel_ids
            else {"small": None, "medium": None, "large": None}
        ),
        image_count=len(gts_by_image),
        instance_count=sum(len(v) for v in gts.values()),
        config_hash=config_hash,
        seed=seed,
    )
    return report
