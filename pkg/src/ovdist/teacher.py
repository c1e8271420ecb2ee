"""Frozen vision-language teacher: text/image encoders and embedding tables.

The default backend is a deterministic stub built around the synthetic
dataset's category color table; an optional adapter can wrap publicly
released pretrained weights behind the same interface.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .geometry import Box, crop_resize_long_side_pad, expand_box

PROMPT_TEMPLATE = "a photo of a {}."
BACKGROUND_PROMPT = "a photo of background."
_BACKGROUND_KEY = "background"

NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingTable:
    """Ordered category names with one L2-normalized embedding row each."""

    names: tuple[str, ...]
    vectors: np.ndarray  # (k, d) float32, rows unit-norm

    def __post_init__(self) -> None:
        if len(self.names) != len(set(self.names)):
            raise ValueError("category names must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise ValueError(
                f"vectors shape {self.vectors.shape} does not match {len(self.names)} names"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-5):
            raise ValueError("embedding rows must be L2-normalized")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, name: str) -> np.ndarray:
        return self.vectors[self.names.index(name)]


class Teacher(Protocol):
    """Frozen encoder pair. Implementations must be pure and read-only."""

    @property
    def dim(self) -> int: ...

    def encode_text(self, text: str) -> np.ndarray: ...

    def encode_image(self, image: np.ndarray) -> np.ndarray: ...


def build_prompt(category_name: str) -> str:
    """Fill the fixed prompt template with a category name, verbatim."""
    if not category_name:
        raise ValueError("category name must be nonempty")
    return PROMPT_TEMPLATE.format(category_name)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (v / n).astype(np.float32)


def encode_categories(names: Sequence[str], teacher: Teacher) -> EmbeddingTable:
    """Encode prompted category names into an embedding table, in input order."""
    if len(names) != len(set(names)):
        raise ValueError(f"duplicate category names in {list(names)}")
    rows = [_normalize(teacher.encode_text(build_prompt(n))) for n in names]
    vectors = np.stack(rows).astype(np.float32) if rows else np.zeros((0, teacher.dim), np.float32)
    return EmbeddingTable(names=tuple(names), vectors=vectors)


def background_embedding(teacher: Teacher) -> np.ndarray:
    """Initial value of the trainable background embedding."""
    return _normalize(teacher.encode_text(BACKGROUND_PROMPT))


def encode_region(image: np.ndarray, box: Box, expansion: float, teacher: Teacher) -> np.ndarray:
    """Teacher embedding of an (optionally expanded) image region."""
    h, w = image.shape[:2]
    expanded = expand_box(box, expansion, bounds=(w, h))
    patch = crop_resize_long_side_pad(image, expanded, target=224)
    return _normalize(teacher.encode_image(patch))


def encode_caption(caption: str, teacher: Teacher) -> np.ndarray:
    """Whole-caption embedding (never per-word)."""
    if not caption:
        raise ValueError("caption must be nonempty")
    return _normalize(teacher.encode_text(caption))


def _seeded_unit_vector(key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    seed = np.frombuffer(digest[:16], dtype=np.uint64)
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class StubTeacher:
    """Seed-deterministic synthetic teacher.

    Text: each known category name maps to a fixed seeded random unit vector;
    a string is encoded as the normalized mean of the vectors of every known
    name appearing in it as a substring (hash-derived unit vector otherwise).
    Image: the dominant category color of the input selects the category,
    whose text vector is returned tilted by a fixed small rotation. Inputs
    with no known color map to the background vector.
    """

    def __init__(
        self,
        categories: Mapping[str, tuple[int, int, int]],
        dim: int = 512,
        seed: int = 0,
        color_tolerance: float = 12.0,
    ) -> None:
        if not categories:
            raise ValueError("stub teacher needs at least one category")
        self._dim = int(dim)
        self._seed = int(seed)
        self._tolerance = float(color_tolerance)
        self._names = tuple(categories.keys())
        self._colors = np.array([categories[n] for n in self._names], dtype=np.float32)
        vectors = {}
        for name in self._names + (_BACKGROUND_KEY,):
            vectors[name] = _seeded_unit_vector(f"{self._seed}:text:{name}", self._dim)
        self._vectors = vectors
        self._image_vectors = np.stack(
            [self._tilted(name) for name in self._names]
        ).astype(np.float32)
        for arr in (self._colors, self._image_vectors):
            arr.setflags(write=False)
        self._text_cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def category_names(self) -> tuple[str, ...]:
        return self._names

    def _tilted(self, name: str) -> np.ndarray:
        """Category text vector rotated by a fixed angle <= 0.1 rad."""
        base = self._vectors[name]
        tilt = _seeded_unit_vector(f"{self._seed}:tilt:{name}", self._dim)
        tilt = tilt - np.dot(tilt, base) * base
        tilt /= np.linalg.norm(tilt)
        angle_digest = hashlib.sha256(f"{self._seed}:angle:{name}".encode()).digest()
        angle = 0.1 * (angle_digest[0] / 255.0)
        return np.cos(angle) * base + np.sin(angle) * tilt

    def encode_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("text must be nonempty")
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached.copy()
        matched = [self._vectors[n] for n in self._names if n in text]
        if _BACKGROUND_KEY in text:
            matched.append(self._vectors[_BACKGROUND_KEY])
        if matched:
            v = np.mean(matched, axis=0)
        else:
            v = _seeded_unit_vector(f"{self._seed}:free:{text}", self._dim)
        out = (v / np.linalg.norm(v)).astype(np.float32)
        out.setflags(write=False)
        self._text_cache[text] = out
        return out.copy()

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != self._colors.shape[1]:
            raise ValueError(f"expected HxWx{self._colors.shape[1]} image, got {image.shape}")
        pixels = np.asarray(image, dtype=np.float32).reshape(-1, self._colors.shape[1])
        close = np.abs(pixels[:, None, :] - self._colors[None, :, :]) <= self._tolerance
        counts = close.all(axis=2).sum(axis=0)
        if counts.max() == 0:
            return self._vectors[_BACKGROUND_KEY].astype(np.float32)
        return self._image_vectors[int(np.argmax(counts))].copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._vectors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self._vectors[name], dtype=np.float64).tobytes())
        h.update(self._image_vectors.astype(np.float64).tobytes())
        h.update(self._colors.astype(np.float64).tobytes())
        return h.hexdigest()


class PretrainedTeacher:
    """Adapter over publicly released vision-language weights (ViT-B/32 style).

    Loads lazily through `transformers`; kept off the default test path. All
    outputs follow the same contract as the stub backend.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32") -> None:
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - optional backend
            raise RuntimeError(
                "pretrained teacher backend requires the 'transformers' package"
            ) from exc
        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_name)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._processor = CLIPProcessor.from_pretrained(model_name)
        self._dim = int(self._model.config.projection_dim)
        self._text_cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:  # pragma: no cover - optional backend
        return self._dim

    def encode_text(self, text: str) -> np.ndarray:  # pragma: no cover - optional backend
        if not text:
            raise ValueError("text must be nonempty")
        if text not in self._text_cache:
            inputs = self._processor(text=[text], return_tensors="pt", padding=True)
            with self._torch.no_grad():
                feats = self._model.get_text_features(**inputs)
            self._text_cache[text] = feats[0].numpy().astype(np.float32)
        return self._text_cache[text].copy()

    def encode_image(self, image: np.ndarray) -> np.ndarray:  # pragma: no cover - optional backend
        arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 255.0).astype(np.uint8)
        inputs = self._processor(images=[arr], return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats[0].numpy().astype(np.float32)


def teacher_checksum(teacher: Teacher) -> str:
    """Stable digest of a teacher's parameters, for frozen-weights checks."""
    if isinstance(teacher, StubTeacher):
        return teacher.checksum()
    probe = [teacher.encode_text(build_prompt("object")), teacher.encode_text(BACKGROUND_PROMPT)]
    h = hashlib.sha256()
    for v in probe:
        h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
    return h.hexdigest()
