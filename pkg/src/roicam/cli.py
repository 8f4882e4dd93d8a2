"""Command-line entry point: ``roicam {generate-data,train,evaluate,explain,report}``.

Exit codes: 0 on success, 1 for usage errors, 2 when a run fails.
Every file written carries the resolved experiment config and package
version so a result can be traced back to the run that made it.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from roicam import __version__
from roicam.data import DISEASED, generate_phantom_dataset, preprocess_crop_layers, read_image, write_dataset
from roicam.evaluation import TABLE_COLUMNS, MetricsReport
from roicam.experiment import (
    ANNOTATION_ALIASES,
    ExperimentConfig,
    evaluate_trained,
    load_split,
    provenance,
    train_experiment,
)
from roicam.explain import binarize_heatmap, compute_cams, render_overlay
from roicam.network import CamNetwork, DualHeadNetwork
from roicam.training import CheckpointError, TrainingError, load_checkpoint, read_checkpoint

log = logging.getLogger("roicam")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

CONFIG_FILE = "config.json"
CHECKPOINT_DIR = "checkpoints"
METRICS_FILE = "metrics.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags below override it")
    p.add_argument("--ratio", type=float, help="keep masks on 1 in R training samples")
    p.add_argument("--baseline", action="store_true", default=None, help="train without any masks")
    p.add_argument("--annotation", choices=["accurate", "bbox", "random", "whole"])
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-model", type=int)
    p.add_argument("--seed-train", type=int)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--cam-tau", type=float)


def _out_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--out", required=required, help="output path")
    p.add_argument("--force", action="store_true", help="overwrite existing output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roicam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roicam {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a phantom dataset with a manifest")
    _experiment_args(g)
    _out_args(g)

    t = sub.add_parser("train", help="train the dual-head network and CAM head")
    _experiment_args(t)
    _out_args(t)

    e = sub.add_parser("evaluate", help="score a trained run on its test split")
    e.add_argument("run", help="run directory written by 'train'")
    _experiment_args(e)
    _out_args(e, required=False)
    e.add_argument("--csv", help="append a table row to this CSV file")

    x = sub.add_parser("explain", help="render CAM overlays for test images")
    x.add_argument("run", help="run directory written by 'train'")
    x.add_argument("images", nargs="*", help="grayscale PNGs to explain (default: diseased test images)")
    x.add_argument("--limit", type=int, default=16, help="number of test images to render")
    x.add_argument("--cam-tau", type=float)
    _out_args(x)

    r = sub.add_parser("report", help="collect metrics files into a Markdown table")
    r.add_argument("inputs", nargs="+", help="metrics JSON files or directories containing them")
    _out_args(r)
    return parser


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Config file (or ``base``) with command-line overrides applied."""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.load(path).to_dict()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config {path}: {exc}") from exc
    else:
        cfg = (base or ExperimentConfig()).to_dict()
    overrides = {
        "ratio": getattr(args, "ratio", None),
        "baseline": getattr(args, "baseline", None),
        "annotation": getattr(args, "annotation", None),
        "seed_data": getattr(args, "seed_data", None),
        "seed_model": getattr(args, "seed_model", None),
        "seed_train": getattr(args, "seed_train", None),
        "iou_threshold": getattr(args, "iou_threshold", None),
        "cam_tau": getattr(args, "cam_tau", None),
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg.get("annotation") not in ANNOTATION_ALIASES:
        raise UsageError(f"unknown annotation mode {cfg.get('annotation')!r}")
    if getattr(args, "out", None) and args.command == "train":
        cfg["out"] = args.out
    try:
        config = ExperimentConfig.from_dict(cfg)
        config.arch_config()
        if config.manifest is None:
            config.phantom_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return config


def _prepare_out(path: Path, force: bool, is_dir: bool) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_run(run_dir) -> tuple[ExperimentConfig, DualHeadNetwork, CamNetwork]:
    """Config plus the final dual-head and CAM networks of a trained run."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / CONFIG_FILE
    if not cfg_path.is_file():
        raise UsageError(f"{run_dir} has no {CONFIG_FILE}; is it a run directory?")
    config = ExperimentConfig.from_dict(json.loads(cfg_path.read_text(encoding="utf-8"))["experiment"])
    found = {}
    for path in sorted((run_dir / CHECKPOINT_DIR).glob("phase*.pt")):
        found[read_checkpoint(path)["kind"]] = path
    if set(found) != {"dual", "cam"}:
        raise CheckpointError(f"{run_dir / CHECKPOINT_DIR} lacks a dual-head or CAM checkpoint")
    arch = config.arch_config()
    return config, load_checkpoint(found["dual"], arch), load_checkpoint(found["cam"], arch)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> None:
    config = resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    split = generate_phantom_dataset(config.phantom_config(), config.counts, config.seed_data)
    manifest = write_dataset(split, out)
    _write_json(out / "provenance.json", provenance(config))
    print(f"wrote {sum(len(p) for p in split.parts().values())} samples; manifest {manifest}")


def cmd_train(args) -> None:
    config = resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    _write_json(out / CONFIG_FILE, provenance(config))
    split = load_split(config)
    net, cam, training_log = train_experiment(config, split, checkpoint_dir=out / CHECKPOINT_DIR)
    training_log.to_jsonl(out / "training_log.jsonl", header=provenance(config))
    report = evaluate_trained(config, net, cam, split)
    report.save(out / METRICS_FILE)
    print(_summary(config.label, report))


def cmd_evaluate(args) -> None:
    base, net, cam = load_run(args.run)
    config = resolve_config(args, base)
    out = Path(args.out) if args.out else Path(args.run) / METRICS_FILE
    if args.out:
        _prepare_out(out, args.force, is_dir=False)
    report = evaluate_trained(config, net, cam, load_split(config))
    report.save(out)
    if args.csv:
        report.append_csv(args.csv)
    print(_summary(config.label, report))


def _explain_inputs(args, config) -> list[tuple[str, np.ndarray, np.ndarray | None]]:
    if not args.images:
        test = [s for s in load_split(config).test if s.label == DISEASED][: max(args.limit, 0)]
        return [(s.sample_id, s.image, s.mask) for s in test]
    size = config.arch_config().input_size
    out = []
    for path in map(Path, args.images):
        image = read_image(path)
        if image.shape != (size, size):
            image = preprocess_crop_layers(image, config.threshold_fraction, size) if config.preprocess else _fit(image, size)
        out.append((path.stem, image, None))
    return out


def _fit(image: np.ndarray, size: int) -> np.ndarray:
    resized = Image.fromarray(image.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def cmd_explain(args) -> None:
    config, _, cam = load_run(args.run)
    tau = config.cam_tau if args.cam_tau is None else args.cam_tau
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    inputs = _explain_inputs(args, config)
    entries = []
    if inputs:
        images = torch.from_numpy(np.stack([img for _, img, _ in inputs]).astype(np.float32))
        with torch.no_grad():
            probs = cam(images).numpy()
        for (name, image, truth), h, p in zip(inputs, compute_cams(cam, images), probs):
            roi = binarize_heatmap(h, tau)
            render_overlay(image, h, roi, truth).save(out / f"{name}.png")
            entries.append(
                {
                    "name": name,
                    "image": f"{name}.png",
                    "probability": float(p),
                    "degenerate": roi.degenerate,
                    "boxes": [list(b) for b in roi.components],
                }
            )
    _write_json(out / "overlays.json", {**provenance(config), "cam_tau": tau, "overlays": entries})
    print(f"wrote {len(entries)} overlays to {out}")


def _collect_metrics(inputs) -> list[Path]:
    paths = []
    for item in map(Path, inputs):
        if item.is_dir():
            paths.extend(sorted(item.rglob(METRICS_FILE)))
        else:
            paths.append(item)
    return paths


def cmd_report(args) -> None:
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    rows = []
    for path in _collect_metrics(args.inputs):
        try:
            report = MetricsReport.load(path)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        rows.append(report.table_row())
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    lines += ["| " + " | ".join(str(v) for v in row) + " |" for row in rows]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} row(s) to {out}")


def _summary(label: str, report: MetricsReport) -> str:
    c, d = report.classification, report.detection
    acc = "n/a" if c["accuracy"] is None else f"{c['accuracy']:.2f}%"
    det = "n/a" if d.detection_accuracy is None else f"{d.detection_accuracy:.2f}%"
    return f"{label}: accuracy {acc}, ROI detection {det} ({d.correct_rois}/{d.total_images})"


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"roicam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"roicam: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
