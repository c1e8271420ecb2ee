"""Objective assembly, optimizer state, and the training loop.

The total objective is a weighted sum of the detection losses
(classification, localization, IOU branch) and the two distillation terms
(instance-level, global-level image and caption directions). Temperatures
and the background embedding are trainable; the teacher never is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import gkd as gkd_mod
from . import ikd as ikd_mod
from .config import RunConfig
from .data import ImageSample, SplitSpec
from .detector import (
    OneStageDetector,
    assign_samples,
    classification_loss,
    classify,
    images_to_tensor,
    iou_branch_loss,
    localization_loss,
    sample_negatives,
)
from .teacher import Teacher, background_embedding, encode_caption, encode_categories

TAU_FLOOR = 1e-2
LOG_FIELDS = (
    "L_cls",
    "L_loc",
    "L_iou",
    "L_ins",
    "L_glo_i",
    "L_glo_c",
    "lambda_cls",
    "lambda_loc",
    "lambda_iou",
    "lambda_ins",
    "lambda_glo",
    "total",
)


@dataclass(frozen=True)
class LossBundle:
    cls: float
    loc: float
    iou: float
    ins: float
    glo_i: float
    glo_c: float
    lambda_cls: float
    lambda_loc: float
    lambda_iou: float
    lambda_ins: float
    lambda_glo: float
    total: float

    def as_log_line(self, step: int) -> str:
        values = (
            self.cls,
            self.loc,
            self.iou,
            self.ins,
            self.glo_i,
            self.glo_c,
            self.lambda_cls,
            self.lambda_loc,
            self.lambda_iou,
            self.lambda_ins,
            self.lambda_glo,
            self.total,
        )
        parts = [f"step={step}"]
        parts.extend(f"{k}={v!r}" for k, v in zip(LOG_FIELDS, values))
        return " ".join(parts)


def total_loss(components: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    """Weighted sum of the named loss components; any NaN is an error naming
    the offending component."""
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise RuntimeError(f"loss component {name!r} is not finite: {value}")
    return (
        weights["lambda_cls"] * components["cls"]
        + weights["lambda_loc"] * components["loc"]
        + weights["lambda_iou"] * components["iou"]
        + weights["lambda_ins"] * components["ins"]
        + weights["lambda_glo"] * (components["glo_i"] + components["glo_c"])
    )


class TrainState:
    """Everything mutable across steps: detector parameters, the trainable
    background embedding and temperatures, optimizer moments, counters."""

    def __init__(
        self,
        config: RunConfig,
        teacher: Teacher,
        split: SplitSpec,
        name_to_id: dict[str, int],
        seed: int,
    ) -> None:
        self.config = config
        self.teacher = teacher
        self.split = split
        self.name_to_id = dict(name_to_id)
        self.seed = int(seed)
        torch.manual_seed(self.seed)
        self.detector = OneStageDetector(config.detector())
        self.base_table = encode_categories(split.base, teacher)
        self.base_table_tensor = torch.from_numpy(self.base_table.vectors.copy())
        self.t_bg = torch.nn.Parameter(torch.from_numpy(background_embedding(teacher).copy()))
        self.tau_c = torch.nn.Parameter(torch.tensor(float(config["training.tau_c_init"])))
        self.tau_m = torch.nn.Parameter(torch.tensor(float(config["training.tau_m_init"])))
        self.optimizer = torch.optim.SGD(
            self.parameters(),
            lr=float(config["training.lr"]),
            momentum=float(config["training.momentum"]),
            weight_decay=float(config["training.weight_decay"]),
        )
        self.step = 0
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.data_rng = np.random.Generator(np.random.PCG64(self.seed + 1))
        self.last_grad_norm = 0.0
        self._caption_cache: dict[str, torch.Tensor] = {}

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.detector.parameters()) + [self.t_bg, self.tau_c, self.tau_m]

    def caption_embedding(self, caption: str) -> torch.Tensor:
        if caption not in self._caption_cache:
            self._caption_cache[caption] = torch.from_numpy(
                encode_caption(caption, self.teacher).copy()
            )
        return self._caption_cache[caption]


def build_train_state(
    config: RunConfig,
    teacher: Teacher,
    split: SplitSpec,
    name_to_id: dict[str, int],
    seed: int | None = None,
) -> TrainState:
    return TrainState(config, teacher, split, name_to_id, config.seed if seed is None else seed)


def _gt_arrays(
    sample: ImageSample, name_to_id: dict[str, int], base_names: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth boxes plus labels as base-table row indices."""
    id_to_row = {name_to_id[n]: i for i, n in enumerate(base_names)}
    boxes, labels = [], []
    for a in sample.annotations:
        row = id_to_row.get(a.category_id)
        if row is None:
            continue
        boxes.append(a.box.as_array())
        labels.append(row)
    if not boxes:
        return np.zeros((0, 4)), np.zeros((0,), dtype=np.int64)
    return np.stack(boxes), np.array(labels, dtype=np.int64)


def train_step(batch: Sequence[ImageSample], state: TrainState) -> tuple[TrainState, LossBundle]:
    """One optimization step over a batch of image samples."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = state.config
    ikd_cfg = cfg.ikd()
    gkd_cfg = cfg.gkd()
    det_cfg = cfg.detector()
    background_index = len(state.split.base)

    images = images_to_tensor([s.pixels for s in batch])
    outputs = state.detector(images)
    layout = outputs.layout

    zero = images.new_zeros(())
    cls_terms, loc_terms, iou_terms, ins_terms = [], [], [], []
    for i, sample in enumerate(batch):
        gt_boxes, gt_labels = _gt_arrays(sample, state.name_to_id, state.split.base)
        assignment = assign_samples(layout, gt_boxes, gt_labels, top_k=det_cfg.assign_top_k)
        keep = sample_negatives(assignment, det_cfg.negative_sampling, state.rng)

        labels = torch.from_numpy(
            np.where(assignment.labels >= 0, assignment.labels, background_index)
        )
        probs = classify(
            outputs.anchor_features[i], state.base_table_tensor, state.t_bg, state.tau_c
        )
        cls_terms.append(
            classification_loss(probs, labels, torch.from_numpy(keep), assignment.n_pos)
        )

        pos_mask = torch.from_numpy(assignment.matched_gt >= 0)
        if assignment.n_pos > 0:
            target_rows = np.zeros((layout.count, 4))
            pos_idx = assignment.positive_indices()
            target_rows[pos_idx] = gt_boxes[assignment.matched_gt[pos_idx]]
            targets = torch.from_numpy(target_rows).to(images.dtype)
            loc_terms.append(localization_loss(outputs.boxes[i], targets, pos_mask))
            if det_cfg.use_iou_branch:
                iou_terms.append(
                    iou_branch_loss(outputs.iou_pred[i], outputs.boxes[i], targets, pos_mask)
                )
        if ikd_cfg.enabled and assignment.n_pos > 0 and state.step >= ikd_cfg.warmup_steps:
            h, w = sample.pixels.shape[:2]
            if ikd_cfg.crop_source == "predicted":
                crop_boxes = outputs.boxes[i].detach().numpy().astype(np.float64)
            else:
                crop_boxes = np.zeros((layout.count, 4))
                pos_idx = assignment.positive_indices()
                crop_boxes[pos_idx] = gt_boxes[assignment.matched_gt[pos_idx]]
            retained = ikd_mod.select_distill_points(
                assignment, crop_boxes, ikd_cfg.iou_threshold, image_size=(w, h)
            )
            if retained.size > 0:
                targets_np = ikd_mod.region_targets(
                    sample.pixels, crop_boxes[retained], ikd_cfg.expansion, state.teacher
                )
                ins_terms.append(
                    ikd_mod.ikd_loss(
                        outputs.anchor_features[i][torch.from_numpy(retained)],
                        torch.from_numpy(targets_np),
                        norm=ikd_cfg.norm,
                    )
                )

    glo_i = zero
    glo_c = zero
    if gkd_cfg.enabled:
        captioned = [(i, s.caption) for i, s in enumerate(batch) if s.caption]
        if captioned:
            patch_sets = []
            caption_vecs = []
            for i, caption in captioned:
                maps_i = [m[i] for m in outputs.feature_maps]
                patch_sets.append(gkd_mod.pool_patches(maps_i, gkd_cfg.grid, gkd_cfg.pooling))
                caption_vecs.append(state.caption_embedding(caption))
            scores = gkd_mod.pairwise_matching_scores(patch_sets, torch.stack(caption_vecs))
            glo_i, glo_c = gkd_mod.global_contrastive_loss(scores, state.tau_m, gkd_cfg.loss)

    components = {
        "cls": torch.stack(cls_terms).mean() if cls_terms else zero,
        "loc": torch.stack(loc_terms).mean() if loc_terms else zero,
        "iou": torch.stack(iou_terms).mean() if iou_terms else zero,
        "ins": torch.stack(ins_terms).mean() if ins_terms else zero,
        "glo_i": glo_i,
        "glo_c": glo_c,
    }
    weights = {
        "lambda_cls": float(cfg["training.lambda_cls"]),
        "lambda_loc": float(cfg["training.lambda_loc"]),
        "lambda_iou": float(cfg["training.lambda_iou"]),
        "lambda_ins": ikd_cfg.weight if ikd_cfg.enabled else 0.0,
        "lambda_glo": gkd_cfg.weight if gkd_cfg.enabled else 0.0,
    }
    loss = total_loss(components, weights)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.last_grad_norm = float(
        torch.nn.utils.clip_grad_norm_(state.parameters(), float(cfg["training.clip_norm"]))
    )
    state.optimizer.step()
    with torch.no_grad():
        state.tau_c.clamp_(min=TAU_FLOOR)
        state.tau_m.clamp_(min=TAU_FLOOR)
    state.step += 1

    bundle = LossBundle(
        cls=float(components["cls"]),
        loc=float(components["loc"]),
        iou=float(components["iou"]),
        ins=float(components["ins"]),
        glo_i=float(components["glo_i"]),
        glo_c=float(components["glo_c"]),
        lambda_cls=weights["lambda_cls"],
        lambda_loc=weights["lambda_loc"],
        lambda_iou=weights["lambda_iou"],
        lambda_ins=weights["lambda_ins"],
        lambda_glo=weights["lambda_glo"],
        total=float(loss),
    )
    return state, bundle


def _lr_for_step(config: RunConfig, step: int) -> float:
    lr = float(config["training.lr"])
    total = int(config["training.steps"])
    for milestone in config["training.lr_decay_milestones"]:
        if step >= int(milestone * total):
            lr *= 0.1
    return lr


def batch_iterator(
    samples: Sequence[ImageSample], batch_size: int, rng: np.random.Generator
):
    """Infinite seed-deterministic batch stream; reshuffles each epoch and
    re-picks one caption per sample per epoch when several exist."""
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            batch = []
            for idx in chunk:
                s = samples[int(idx)]
                if len(s.captions) > 1:
                    pick = int(rng.integers(0, len(s.captions)))
                    s = ImageSample(s.image_id, s.pixels, s.annotations, (s.captions[pick],))
                batch.append(s)
            yield batch


def train_run(
    config: RunConfig,
    teacher: Teacher,
    split: SplitSpec,
    samples: Sequence[ImageSample],
    name_to_id: dict[str, int],
    out_dir: str | Path,
) -> tuple[TrainState, Path]:
    """Full training run: writes the step log and checkpoints, returns the
    final state and the log path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = build_train_state(config, teacher, split, name_to_id)
    steps = int(config["training.steps"])
    every = int(config["training.checkpoint_every"])
    log_path = out / "train_log.txt"
    batches = batch_iterator(samples, int(config["training.batch_size"]), state.data_rng)
    with open(log_path, "w") as log:
        log.write(f"# config_hash={config.hash()} seed={config.seed}\n")
        for _ in range(steps):
            lr = _lr_for_step(config, state.step)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            state, bundle = train_step(next(batches), state)
            log.write(bundle.as_log_line(state.step) + "\n")
            if every > 0 and state.step % every == 0 and state.step < steps:
                save_checkpoint(state, out / f"checkpoint_{state.step:06d}.pt")
    save_checkpoint(state, out / "checkpoint_final.pt")
    return state, log_path


CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "detector": state.detector.state_dict(),
        "t_bg": state.t_bg.detach().clone(),
        "tau_c": state.tau_c.detach().clone(),
        "tau_m": state.tau_m.detach().clone(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "seed": state.seed,
        "config_hash": state.config.hash(),
        "config_items": {k: v for k, v in state.config.items()},
        "split": {
            "base": list(state.split.base),
            "novel": list(state.split.novel),
            "id": state.split.split_id,
        },
        "name_to_id": state.name_to_id,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, teacher: Teacher) -> TrainState:
    payload = torch.load(path, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = RunConfig(payload["config_items"])
    split = SplitSpec(
        base=tuple(payload["split"]["base"]),
        novel=tuple(payload["split"]["novel"]),
        split_id=payload["split"]["id"],
    )
    state = TrainState(config, teacher, split, payload["name_to_id"], payload["seed"])
    state.detector.load_state_dict(payload["detector"])
    with torch.no_grad():
        state.t_bg.copy_(payload["t_bg"])
        state.tau_c.copy_(payload["tau_c"])
        state.tau_m.copy_(payload["tau_m"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = int(payload["step"])
    return state
