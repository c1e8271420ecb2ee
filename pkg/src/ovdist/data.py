"""Dataset ingestion and the synthetic shapes-and-captions generator.

Annotation files follow a COCO-style JSON schema:

    {
      "images":      [{"id", "file_name", "width", "height"}, ...],
      "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h],
                       "area"}, ...],
      "categories":  [{"id", "name", "color": [r, g, b], "shape"}, ...],
      "captions":    {"<image_id>": "..." | ["...", ...]}
    }

`color`/`shape` are extensions used by the synthetic world and the stub
teacher. Captions are keyed by image id and may hold one string or a list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .geometry import Box

TRAIN_ANNOTATIONS = "annotations_train.json"
TEST_ANNOTATIONS = "annotations_test.json"
SPLIT_FILE = "split.json"
IMAGE_DIR = "images"

SHAPES = ("circle", "square", "triangle")


class DataError(ValueError):
    """Raised for malformed annotation files or impossible generation configs."""


@dataclass(frozen=True)
class SplitSpec:
    base: tuple[str, ...]
    novel: tuple[str, ...]
    split_id: str = ""

    def __post_init__(self) -> None:
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise DataError(f"base/novel categories overlap: {sorted(overlap)}")

    @property
    def all_names(self) -> tuple[str, ...]:
        return self.base + self.novel


@dataclass(frozen=True)
class Annotation:
    box: Box
    category_id: int


@dataclass(frozen=True)
class ImageSample:
    image_id: int
    pixels: np.ndarray  # HxWx3 uint8
    annotations: tuple[Annotation, ...]
    captions: tuple[str, ...] = ()

    @property
    def caption(self) -> str | None:
        return self.captions[0] if self.captions else None

    def box_array(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([a.box.as_array() for a in self.annotations])

    def label_array(self) -> np.ndarray:
        return np.array([a.category_id for a in self.annotations], dtype=np.int64)


@dataclass(frozen=True)
class CategoryInfo:
    id: int
    name: str
    color: tuple[int, int, int] | None = None
    shape: str | None = None


def load_split(path: str | Path) -> SplitSpec:
    with open(path) as fh:
        raw = json.load(fh)
    return SplitSpec(
        base=tuple(raw["base"]), novel=tuple(raw["novel"]), split_id=raw.get("id", "")
    )


def load_categories(annotation_path: str | Path) -> list[CategoryInfo]:
    with open(annotation_path) as fh:
        raw = json.load(fh)
    out = []
    for c in raw["categories"]:
        color = tuple(c["color"]) if "color" in c else None
        out.append(CategoryInfo(id=int(c["id"]), name=c["name"], color=color, shape=c.get("shape")))
    return out


def color_table(annotation_path: str | Path) -> dict[str, tuple[int, int, int]]:
    """Name -> color map used to build a stub teacher for a dataset."""
    table = {}
    for c in load_categories(annotation_path):
        if c.color is None:
            raise DataError(f"category {c.name!r} has no color entry")
        table[c.name] = c.color
    return table


def load_dataset(
    annotation_path: str | Path,
    images_root: str | Path,
    split: SplitSpec,
    phase: str,
) -> list[ImageSample]:
    """Load one phase of a dataset.

    The training phase drops annotations of novel categories but keeps the
    images and their captions verbatim; the test phase keeps everything.
    """
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    annotation_path = Path(annotation_path)
    try:
        with open(annotation_path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse {annotation_path}: {exc}") from exc

    known = set(split.all_names)
    id_to_name: dict[int, str] = {}
    for c in raw.get("categories", ()):
        name = c["name"]
        if name not in known:
            raise DataError(f"{annotation_path}: unknown category {name!r} (not in split)")
        id_to_name[int(c["id"])] = name
    novel_ids = {cid for cid, name in id_to_name.items() if name in split.novel}

    by_image: dict[int, list[Annotation]] = {}
    for idx, a in enumerate(raw.get("annotations", ())):
        cid = int(a["category_id"])
        if cid not in id_to_name:
            raise DataError(f"{annotation_path}: annotation {idx} has unknown category id {cid}")
        x, y, w, h = (float(v) for v in a["bbox"])
        by_image.setdefault(int(a["image_id"]), []).append(
            Annotation(box=Box(x, y, x + w, y + h), category_id=cid)
        )

    captions_raw: Mapping[str, object] = raw.get("captions", {})
    samples = []
    images_root = Path(images_root)
    for entry in sorted(raw["images"], key=lambda e: int(e["id"])):
        image_id = int(entry["id"])
        path = images_root / entry["file_name"]
        try:
            pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        if pixels.shape[0] != entry["height"] or pixels.shape[1] != entry["width"]:
            raise DataError(f"{path}: size {pixels.shape[:2]} disagrees with annotations")
        anns = by_image.get(image_id, [])
        h, w = pixels.shape[:2]
        for a in anns:
            if a.box.x1 < -1e-6 or a.box.y1 < -1e-6 or a.box.x2 > w + 1e-6 or a.box.y2 > h + 1e-6:
                raise DataError(f"{annotation_path}: box {a.box} outside image {image_id}")
        if phase == "train":
            anns = [a for a in anns if a.category_id not in novel_ids]
        caps = captions_raw.get(str(image_id), captions_raw.get(image_id, ()))
        if isinstance(caps, str):
            caps = (caps,)
        samples.append(
            ImageSample(
                image_id=image_id,
                pixels=pixels,
                annotations=tuple(anns),
                captions=tuple(caps),
            )
        )
    return samples


# --- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticCategory:
    name: str
    color: tuple[int, int, int]
    shape: str
    novel: bool = False


DEFAULT_CATEGORIES = (
    SyntheticCategory("red circle", (220, 40, 40), "circle"),
    SyntheticCategory("green square", (40, 200, 80), "square"),
    SyntheticCategory("blue triangle", (60, 90, 230), "triangle"),
    SyntheticCategory("yellow circle", (235, 215, 60), "circle", novel=True),
    SyntheticCategory("purple square", (165, 60, 210), "square", novel=True),
)


@dataclass(frozen=True)
class SyntheticConfig:
    train_count: int = 500
    test_count: int = 100
    image_size: int = 64
    categories: tuple[SyntheticCategory, ...] = DEFAULT_CATEGORIES
    min_objects: int = 1
    max_objects: int = 4
    min_object_frac: float = 0.16
    max_object_frac: float = 0.34
    placement_retries: int = 60

    def __post_init__(self) -> None:
        base = [c for c in self.categories if not c.novel]
        novel = [c for c in self.categories if c.novel]
        if len(base) < 2 or len(novel) < 1:
            raise DataError("need at least 2 base and 1 novel category")
        colors = [c.color for c in self.categories]
        if len(set(colors)) != len(colors):
            raise DataError("category colors must be unique")
        for c in self.categories:
            if c.shape not in SHAPES:
                raise DataError(f"unknown shape {c.shape!r}")


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean raster of one shape inside a size x size cell."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        r = (size - 1) / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # upright isosceles: apex at top center, base along the bottom row
        base_y = size - 1
        half = (size - 1) / 2.0
        frac = yy / max(base_y, 1)
        return np.abs(xx - half) <= half * frac
    raise DataError(f"unknown shape {shape!r}")


def _caption_for(names: Sequence[str]) -> str:
    phrases = [f"a {n}" for n in names]
    if len(phrases) == 1:
        listing = phrases[0]
    else:
        listing = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"a photo with {listing}."


def _render_image(
    cfg: SyntheticConfig, rng: np.random.Generator
) -> tuple[np.ndarray, list[tuple[Box, int]], str]:
    size = cfg.image_size
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    order = rng.permutation(len(cfg.categories))[:count]
    placed_boxes: list[tuple[int, int, int, int]] = []
    annotations: list[tuple[Box, int]] = []
    names: list[str] = []
    lo = max(4, int(round(cfg.min_object_frac * size)))
    hi = max(lo + 1, int(round(cfg.max_object_frac * size)))
    for cat_index in order:
        cat = cfg.categories[int(cat_index)]
        placed = False
        for _ in range(cfg.placement_retries):
            side = int(rng.integers(lo, hi + 1))
            if side >= size:
                continue
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            cell = (x0, y0, x0 + side, y0 + side)
            overlaps = any(
                cell[0] < b[2] and b[0] < cell[2] and cell[1] < b[3] and b[1] < cell[3]
                for b in placed_boxes
            )
            if overlaps:
                continue
            mask = _shape_mask(cat.shape, side)
            ys, xs = np.nonzero(mask)
            image[y0 + ys, x0 + xs] = cat.color
            tight = Box(
                x0 + float(xs.min()),
                y0 + float(ys.min()),
                x0 + float(xs.max()) + 1.0,
                y0 + float(ys.max()) + 1.0,
            )
            placed_boxes.append(cell)
            annotations.append((tight, int(cat_index)))
            names.append(cat.name)
            placed = True
            break
        if not placed:
            raise DataError(
                f"could not place {count} non-overlapping shapes after "
                f"{cfg.placement_retries} retries (image size {size})"
            )
    return image, annotations, _caption_for(names)


def generate_synthetic(cfg: SyntheticConfig, out_dir: str | Path, seed: int) -> Path:
    """Write a seeded synthetic dataset (images, annotations, split) to disk."""
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    categories_json = [
        {
            "id": i + 1,
            "name": c.name,
            "color": list(c.color),
            "shape": c.shape,
        }
        for i, c in enumerate(cfg.categories)
    ]

    def emit(count: int, first_id: int, filename: str) -> None:
        images, annotations, captions = [], [], {}
        ann_id = 1
        for k in range(count):
            image_id = first_id + k
            pixels, anns, caption = _render_image(cfg, rng)
            file_name = f"{IMAGE_DIR}/img_{image_id:06d}.png"
            Image.fromarray(pixels).save(out / file_name)
            images.append(
                {
                    "id": image_id,
                    "file_name": file_name,
                    "width": cfg.image_size,
                    "height": cfg.image_size,
                }
            )
            for box, cat_index in anns:
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": image_id,
                        "category_id": cat_index + 1,
                        "bbox": [box.x1, box.y1, box.width, box.height],
                        "area": box.area,
                    }
                )
                ann_id += 1
            captions[str(image_id)] = caption
        payload = {
            "images": images,
            "annotations": annotations,
            "categories": categories_json,
            "captions": captions,
        }
        with open(out / filename, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")

    emit(cfg.train_count, 1, TRAIN_ANNOTATIONS)
    emit(cfg.test_count, cfg.train_count + 1, TEST_ANNOTATIONS)

    split = {
        "id": f"{sum(not c.novel for c in cfg.categories)}/{sum(c.novel for c in cfg.categories)}",
        "base": [c.name for c in cfg.categories if not c.novel],
        "novel": [c.name for c in cfg.categories if c.novel],
    }
    with open(out / SPLIT_FILE, "w") as fh:
        json.dump(split, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return out
