"""Run configuration: flat INI-style files with dotted section keys.

One mechanism everywhere: `section.key = value` lines, `#` comments, merged
with command-line `--set section.key=value` overrides. Every key is checked
against the schema below; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .detector import NEGATIVE_SAMPLING_STRATEGIES, DetectorConfig
from .gkd import LOSS_VARIANTS, POOLING_MODES, GkdConfig
from .ikd import CROP_SOURCES, NORMS, IkdConfig

DATA_ROOT_ENV = "OVDIST_DATA_ROOT"


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or failed cross-checks."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip() != "")


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip() != "")


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    choices: tuple | None = None


SCHEMA: dict[str, _Key] = {
    "seed": _Key(int, 0),
    # data
    "data.root": _Key(str, "data/synthetic"),
    "data.split": _Key(str, ""),
    "data.image_size": _Key(int, 64),
    "data.train_count": _Key(int, 500),
    "data.test_count": _Key(int, 100),
    "data.min_objects": _Key(int, 1),
    "data.max_objects": _Key(int, 4),
    "data.min_object_frac": _Key(float, 0.16),
    "data.max_object_frac": _Key(float, 0.34),
    # detector
    "detector.widths": _Key(_parse_int_list, (32, 64, 128, 256)),
    "detector.levels": _Key(int, 5),
    "detector.base_stride": _Key(int, 8),
    "detector.anchor_scales": _Key(_parse_float_list, (2.0,)),
    "detector.feature_dim": _Key(int, 512),
    "detector.negative_sampling": _Key(str, "10%", NEGATIVE_SAMPLING_STRATEGIES),
    "detector.use_iou_branch": _Key(_parse_bool, True),
    "detector.tower_depth": _Key(int, 2),
    "detector.assign_top_k": _Key(int, 9),
    # instance-level distillation
    "ikd.enabled": _Key(_parse_bool, True),
    "ikd.norm": _Key(str, "l1", NORMS),
    "ikd.weight": _Key(float, 1.0),
    "ikd.crop_source": _Key(str, "predicted", CROP_SOURCES),
    "ikd.expansion": _Key(float, 1.5),
    "ikd.iou_threshold": _Key(float, 0.5),
    "ikd.warmup_steps": _Key(int, 0),
    # global-level distillation
    "gkd.enabled": _Key(_parse_bool, True),
    "gkd.grid": _Key(int, 3),
    "gkd.pooling": _Key(str, "max", POOLING_MODES),
    "gkd.loss": _Key(str, "contrastive", LOSS_VARIANTS),
    "gkd.weight": _Key(float, 0.1),
    # training
    "training.steps": _Key(int, 500),
    "training.batch_size": _Key(int, 8),
    "training.lr": _Key(float, 0.01),
    "training.momentum": _Key(float, 0.9),
    "training.weight_decay": _Key(float, 0.0),
    "training.clip_norm": _Key(float, 10.0),
    "training.tau_c_init": _Key(float, 100.0),
    "training.tau_m_init": _Key(float, 10.0),
    "training.lambda_cls": _Key(float, 1.0),
    "training.lambda_loc": _Key(float, 2.0),
    "training.lambda_iou": _Key(float, 0.5),
    "training.lr_decay_milestones": _Key(_parse_float_list, (0.67, 0.89)),
    "training.checkpoint_every": _Key(int, 0),
    # evaluation / inference protocol
    "evaluation.score_threshold": _Key(float, 0.0),
    "evaluation.nms_threshold": _Key(float, 0.4),
    "evaluation.match_iou": _Key(float, 0.5),
    "evaluation.recall_budgets": _Key(_parse_int_list, (100,)),
    "evaluation.class_agnostic_recall": _Key(_parse_bool, True),
    "evaluation.direct_top_k": _Key(int, 100),
    "evaluation.direct_tau": _Key(float, 100.0),
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _canonical(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Typed view over the merged flat configuration."""

    def __init__(self, values: Mapping[str, Any]) -> None:
        self._values = dict(values)
        self._validate()

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def items(self) -> list[tuple[str, Any]]:
        return sorted(self._values.items())

    def _validate(self) -> None:
        if self["data.min_objects"] < 1 or self["data.max_objects"] < self["data.min_objects"]:
            raise ConfigError("data.min_objects/max_objects out of order")
        if not 0.0 < self["data.min_object_frac"] <= self["data.max_object_frac"] < 1.0:
            raise ConfigError("data object size fractions out of order")
        if self["training.tau_c_init"] <= 0 or self["training.tau_m_init"] <= 0:
            raise ConfigError("temperature initializers must be positive")
        if self["training.batch_size"] < 1 or self["training.steps"] < 1:
            raise ConfigError("training.steps and training.batch_size must be >= 1")
        for m in self["training.lr_decay_milestones"]:
            if not 0.0 < m < 1.0:
                raise ConfigError("lr decay milestones must lie in (0, 1)")
        # constructing the section configs runs their own validation
        self.detector()
        self.ikd()
        self.gkd()

    @property
    def seed(self) -> int:
        return int(self["seed"])

    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV, self["data.root"]))

    def split_path(self) -> Path:
        explicit = self["data.split"]
        return Path(explicit) if explicit else self.data_root() / "split.json"

    def detector(self) -> DetectorConfig:
        try:
            return DetectorConfig(
                widths=self["detector.widths"],
                levels=self["detector.levels"],
                base_stride=self["detector.base_stride"],
                anchor_scales=self["detector.anchor_scales"],
                feature_dim=self["detector.feature_dim"],
                negative_sampling=self["detector.negative_sampling"],
                use_iou_branch=self["detector.use_iou_branch"],
                tower_depth=self["detector.tower_depth"],
                assign_top_k=self["detector.assign_top_k"],
            )
        except ValueError as exc:
            raise ConfigError(f"detector: {exc}") from exc

    def ikd(self) -> IkdConfig:
        try:
            return IkdConfig(
                enabled=self["ikd.enabled"],
                norm=self["ikd.norm"],
                weight=self["ikd.weight"],
                crop_source=self["ikd.crop_source"],
                expansion=self["ikd.expansion"],
                iou_threshold=self["ikd.iou_threshold"],
                warmup_steps=self["ikd.warmup_steps"],
            )
        except ValueError as exc:
            raise ConfigError(f"ikd: {exc}") from exc

    def gkd(self) -> GkdConfig:
        try:
            return GkdConfig(
                enabled=self["gkd.enabled"],
                grid=self["gkd.grid"],
                pooling=self["gkd.pooling"],
                loss=self["gkd.loss"],
                weight=self["gkd.weight"],
            )
        except ValueError as exc:
            raise ConfigError(f"gkd: {exc}") from exc

    def canonical_lines(self) -> list[str]:
        return [f"{k} = {_canonical(v)}" for k, v in self.items()]

    def hash(self) -> str:
        payload = "\n".join(self.canonical_lines()).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def build_run_config(
    config_file: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Merge defaults, an optional config file, and override strings."""
    merged: dict[str, Any] = {key: spec.default for key, spec in SCHEMA.items()}

    def apply(source: Mapping[str, str], origin: str) -> None:
        for key, raw in source.items():
            spec = SCHEMA.get(key)
            if spec is None:
                raise ConfigError(f"{origin}: unknown config key {key!r}")
            try:
                value = spec.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{origin}: bad value for {key!r}: {exc}") from exc
            if spec.choices is not None and value not in spec.choices:
                raise ConfigError(
                    f"{origin}: {key!r} must be one of {list(spec.choices)}, got {value!r}"
                )
            merged[key] = value

    if config_file is not None:
        apply(parse_config_file(config_file), str(config_file))
    if overrides:
        apply(overrides, "--set")
    if seed is not None:
        merged["seed"] = int(seed)
    return RunConfig(merged)


def parse_set_args(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out
