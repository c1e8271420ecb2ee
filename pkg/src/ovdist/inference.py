"""Vocabulary swapping, detection decoding, and teacher-direct alternatives.

At inference the distillation machinery is gone: the classifier table is
rebuilt from whichever category set the protocol asks for (novel only,
base + novel, or base), and per-anchor scores are the category probability
times the predicted IOU.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .data import Annotation
from .detector import classify
from .geometry import Box, Detection, InvalidCropError, clip_box, nms
from .teacher import EmbeddingTable, Teacher, encode_categories, encode_region

MODES = ("zsd", "gzsd", "base")


@dataclass(frozen=True)
class VocabularyMode:
    """Active category set for one evaluation protocol."""

    mode: str
    names: tuple[str, ...]
    category_ids: tuple[int, ...]
    table: EmbeddingTable

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (len(self.names) == len(self.category_ids) == len(self.table.names)):
            raise ValueError("names, ids, and table rows must align")


def build_vocabulary(
    mode: str,
    split,
    teacher: Teacher,
    name_to_id: Mapping[str, int],
) -> VocabularyMode:
    if mode == "zsd":
        names = tuple(split.novel)
    elif mode == "gzsd":
        names = tuple(split.base) + tuple(split.novel)
    elif mode == "base":
        names = tuple(split.base)
    else:
        raise ValueError(f"mode must be one of {MODES}")
    table = encode_categories(names, teacher)
    return VocabularyMode(
        mode=mode,
        names=names,
        category_ids=tuple(int(name_to_id[n]) for n in names),
        table=table,
    )


@dataclass
class AnchorScores:
    """Per-anchor classification probabilities and auxiliary outputs for one
    image under one vocabulary."""

    probs: np.ndarray  # (N, k+1), background last
    iou: np.ndarray  # (N,)
    boxes: np.ndarray  # (N, 4) clipped to the image
    layout: object

    def category_grids(self, category_index: int) -> list[np.ndarray]:
        grids = []
        for slc, (h, w) in zip(self.layout.level_slices, self.layout.grids):
            grids.append(self.probs[slc, category_index].reshape(h, w))
        return grids


def anchor_scores(image: np.ndarray, state, vocab: VocabularyMode) -> AnchorScores:
    """Run the detector on one image and score every anchor under `vocab`."""
    from .detector import images_to_tensor

    state.detector.eval()
    with torch.no_grad():
        outputs = state.detector(images_to_tensor([image]))
        table = torch.from_numpy(vocab.table.vectors.copy())
        probs = classify(outputs.anchor_features[0], table, state.t_bg, state.tau_c)
        h, w = image.shape[:2]
        boxes = outputs.boxes[0].numpy().astype(np.float64)
        boxes[:, 0::2] = boxes[:, 0::2].clip(0.0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clip(0.0, h)
        return AnchorScores(
            probs=probs.numpy().astype(np.float64),
            iou=outputs.iou_pred[0].numpy().astype(np.float64),
            boxes=boxes,
            layout=outputs.layout,
        )


def detect(
    image: np.ndarray,
    state,
    vocab: VocabularyMode,
    score_threshold: float = 0.0,
    nms_threshold: float = 0.4,
) -> list[Detection]:
    """Dense detection: every (anchor, category) pair scored as category
    probability times predicted IOU, filtered, then class-wise NMS. The
    background row only normalizes the softmax and is never emitted."""
    scored = anchor_scores(image, state, vocab)
    k = len(vocab.names)
    scores = scored.probs[:, :k] * scored.iou[:, None]
    candidates: list[Detection] = []
    anchor_idx, cat_idx = np.nonzero(scores > score_threshold)
    for a, c in zip(anchor_idx, cat_idx):
        box = Box.from_array(scored.boxes[a])
        if box.area <= 0.0:
            continue
        candidates.append(
            Detection(box=box, category=vocab.category_ids[c], score=float(min(scores[a, c], 1.0)))
        )
    return nms(candidates, nms_threshold)


def direct_inference(
    image: np.ndarray,
    state,
    teacher: Teacher,
    novel_names: Sequence[str],
    name_to_id: Mapping[str, int],
    k: int = 100,
    tau: float = 100.0,
    nms_threshold: float = 0.4,
) -> list[Detection]:
    """Teacher-direct alternative: the detector proposes foreground anchors
    (top-k by classification-times-IOU score), the teacher classifies the
    cropped predicted boxes, and NMS merges the result."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    table = encode_categories(novel_names, teacher)
    vocab = VocabularyMode(
        mode="zsd",
        names=tuple(novel_names),
        category_ids=tuple(int(name_to_id[n]) for n in novel_names),
        table=table,
    )
    scored = anchor_scores(image, state, vocab)
    n_cats = len(vocab.names)
    fg_score = scored.probs[:, :n_cats].max(axis=1) * scored.iou
    order = np.argsort(-fg_score, kind="stable")[:k]
    candidates: list[Detection] = []
    for a in order:
        box = Box.from_array(scored.boxes[a])
        if box.area <= 0.0:
            continue
        try:
            v = encode_region(image, box, 1.0, teacher)
        except InvalidCropError:
            continue
        logits = tau * (table.vectors @ v)
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        c = int(np.argmax(p))
        candidates.append(
            Detection(box=box, category=vocab.category_ids[c], score=float(min(p[c], 1.0)))
        )
    return nms(candidates, nms_threshold)


def upper_bound_inference(
    image: np.ndarray,
    annotations: Sequence[Annotation],
    teacher: Teacher,
    category_names: Sequence[str],
    name_to_id: Mapping[str, int],
    tau: float = 100.0,
) -> list[Detection]:
    """Ideal upper bound: keep every ground-truth box verbatim and let the
    teacher classify it over `category_names`. No NMS."""
    table = encode_categories(category_names, teacher)
    ids = [int(name_to_id[n]) for n in category_names]
    out: list[Detection] = []
    for ann in annotations:
        v = encode_region(image, ann.box, 1.0, teacher)
        logits = tau * (table.vectors @ v)
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        c = int(np.argmax(p))
        out.append(Detection(box=ann.box, category=ids[c], score=float(min(p[c], 1.0))))
    return out


def write_detections(
    path: str | Path,
    detections_by_image: Mapping[int, Sequence[Detection]],
    id_to_name: Mapping[int, str],
    config_hash: str = "",
    seed: int | None = None,
) -> None:
    """Tab-separated dump: image id, category name, score, x1, y1, x2, y2."""
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash} seed={seed}\n")
        fh.write("# image_id\tcategory\tscore\tx1\ty1\tx2\ty2\n")
        for image_id in sorted(detections_by_image):
            for d in detections_by_image[image_id]:
                fh.write(
                    f"{image_id}\t{id_to_name[d.category]}\t{d.score!r}\t"
                    f"{d.box.x1!r}\t{d.box.y1!r}\t{d.box.x2!r}\t{d.box.y2!r}\n"
                )


def read_detections(
    path: str | Path, name_to_id: Mapping[str, int]
) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        image_id, name, score, x1, y1, x2, y2 = line.split("\t")
        out.setdefault(int(image_id), []).append(
            Detection(
                box=Box(float(x1), float(y1), float(x2), float(y2)),
                category=int(name_to_id[name]),
                score=float(score),
            )
        )
    return out
