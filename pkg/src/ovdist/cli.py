"""Command-line operator surface.

Subcommands: synth-data, train, eval, infer, direct-infer, plot-scores.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import inference as infer_mod
from . import plots as plots_mod
from . import training as train_mod
from .config import ConfigError, RunConfig, build_run_config, parse_set_args
from .teacher import StubTeacher

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _build_config(args: argparse.Namespace) -> RunConfig:
    return build_run_config(
        config_file=args.config,
        overrides=parse_set_args(args.set),
        seed=args.seed,
    )


def _load_world(config: RunConfig, phase: str):
    """Dataset, split, teacher, and the category id maps for one phase."""
    root = config.data_root()
    split = data_mod.load_split(config.split_path())
    ann_file = root / (
        data_mod.TRAIN_ANNOTATIONS if phase == "train" else data_mod.TEST_ANNOTATIONS
    )
    samples = data_mod.load_dataset(ann_file, root, split, phase)
    categories = data_mod.load_categories(ann_file)
    name_to_id = {c.name: c.id for c in categories}
    teacher = StubTeacher(data_mod.color_table(ann_file), dim=config["detector.feature_dim"])
    return samples, split, teacher, name_to_id


def cmd_synth_data(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out) if args.out else config.data_root()
    cfg = data_mod.SyntheticConfig(
        train_count=config["data.train_count"],
        test_count=config["data.test_count"],
        image_size=config["data.image_size"],
        min_objects=config["data.min_objects"],
        max_objects=config["data.max_objects"],
        min_object_frac=config["data.min_object_frac"],
        max_object_frac=config["data.max_object_frac"],
    )
    data_mod.generate_synthetic(cfg, out, seed=config.seed)
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out or "runs/train")
    samples, split, teacher, name_to_id = _load_world(config, "train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_used.cfg").write_text(
        f"# config_hash={config.hash()}\n" + "\n".join(config.canonical_lines()) + "\n"
    )
    _, log_path = train_mod.train_run(config, teacher, split, samples, name_to_id, out)
    print(f"training done; log at {log_path}, checkpoint at {out / 'checkpoint_final.pt'}")
    return EXIT_OK


def _checkpoint_state(args: argparse.Namespace, config: RunConfig):
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    root = config.data_root()
    ann_file = root / data_mod.TEST_ANNOTATIONS
    teacher = StubTeacher(data_mod.color_table(ann_file), dim=config["detector.feature_dim"])
    return train_mod.load_checkpoint(path, teacher), teacher


def _run_protocol(args: argparse.Namespace, config: RunConfig):
    """Detections for every test image under the requested protocol."""
    samples, split, teacher, name_to_id = _load_world(config, "test")
    state, _ = _checkpoint_state(args, config)
    mode = args.mode
    protocol = getattr(args, "protocol", "model")
    dets: dict[int, list] = {}
    for sample in samples:
        if protocol == "model":
            vocab = infer_mod.build_vocabulary(mode, split, teacher, name_to_id)
            dets[sample.image_id] = infer_mod.detect(
                sample.pixels,
                state,
                vocab,
                score_threshold=config["evaluation.score_threshold"],
                nms_threshold=config["evaluation.nms_threshold"],
            )
        elif protocol == "direct":
            names = split.novel if mode == "zsd" else split.base + split.novel
            dets[sample.image_id] = infer_mod.direct_inference(
                sample.pixels,
                state,
                teacher,
                names,
                name_to_id,
                k=config["evaluation.direct_top_k"],
                tau=config["evaluation.direct_tau"],
                nms_threshold=config["evaluation.nms_threshold"],
            )
        elif protocol == "upper-bound":
            names = split.novel if mode == "zsd" else split.base + split.novel
            dets[sample.image_id] = infer_mod.upper_bound_inference(
                sample.pixels,
                sample.annotations,
                teacher,
                names,
                name_to_id,
                tau=config["evaluation.direct_tau"],
            )
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
    gts = {s.image_id: list(s.annotations) for s in samples}
    return dets, gts, split, name_to_id


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    dets, gts, split, name_to_id = _run_protocol(args, config)
    id_to_name = {v: k for k, v in name_to_id.items()}
    infer_mod.write_detections(
        out / "detections.tsv", dets, id_to_name, config.hash(), config.seed
    )
    report = eval_mod.evaluate_detections(
        dets,
        gts,
        split,
        name_to_id,
        mode=args.mode,
        iou_threshold=config["evaluation.match_iou"],
        recall_budgets=config["evaluation.recall_budgets"],
        class_agnostic_recall=config["evaluation.class_agnostic_recall"],
        config_hash=config.hash(),
        seed=config.seed,
    )
    report.save(out)
    plots_mod.save_ap_figure(report, out / "ap_per_category.png")
    print(report.to_table())
    print(f"report written to {out}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    dets, _, _, name_to_id = _run_protocol(args, config)
    id_to_name = {v: k for k, v in name_to_id.items()}
    infer_mod.write_detections(
        out / "detections.tsv", dets, id_to_name, config.hash(), config.seed
    )
    print(f"detections written to {out / 'detections.tsv'}")
    return EXIT_OK


def cmd_plot_scores(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out or "runs/plots")
    out.mkdir(parents=True, exist_ok=True)
    samples, split, teacher, name_to_id = _load_world(config, "test")
    state, _ = _checkpoint_state(args, config)
    sample = next((s for s in samples if s.image_id == args.image_id), None)
    if sample is None:
        raise ValueError(f"image id {args.image_id} not in the test set")
    vocab = infer_mod.build_vocabulary(args.mode, split, teacher, name_to_id)
    if args.category not in vocab.names:
        raise ValueError(f"category {args.category!r} not active in mode {args.mode!r}")
    scored = infer_mod.anchor_scores(sample.pixels, state, vocab)
    grids = scored.category_grids(vocab.names.index(args.category))
    slug = args.category.replace(" ", "_")
    for level, grid in enumerate(grids):
        np.savetxt(
            out / f"scores_{slug}_level{level}.csv",
            grid,
            delimiter=",",
            header=f"config_hash={config.hash()} seed={config.seed} "
            f"image_id={args.image_id} category={args.category} level={level}",
        )
    plots_mod.save_score_heatmaps(
        grids, state.detector.config.strides, args.category, out / f"scores_{slug}.png"
    )
    print(f"score grids written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovdist",
        description="open-vocabulary one-stage detector trained by vision-language distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic shapes dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    for name, func, with_protocol in (
        ("eval", cmd_eval, True),
        ("infer", cmd_infer, True),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--mode", choices=infer_mod.MODES, default="zsd")
        p.add_argument("--split", help="explicit split file path")
        if with_protocol:
            p.add_argument(
                "--protocol", choices=("model", "direct", "upper-bound"), default="model"
            )
        p.set_defaults(func=func)

    p = sub.add_parser("direct-infer", help="teacher-direct inference dump")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=infer_mod.MODES, default="zsd")
    p.add_argument("--split", help="explicit split file path")
    p.set_defaults(func=cmd_infer, protocol="direct")

    p = sub.add_parser("plot-scores", help="per-level classification-score grids")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--mode", choices=infer_mod.MODES, default="gzsd")
    p.set_defaults(func=cmd_plot_scores)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "split", None):
        args.set = list(args.set) + [f"data.split={args.split}"]
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
