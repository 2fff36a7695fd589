"""Command-line entry point.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``eval``,
``interpret`` (attribution rasters), ``assess`` (drought classification),
and ``ablate`` (feature importance). Every run resolves its configuration
as defaults < config file < explicit flags, writes a ``manifest.json``
next to its outputs before computing anything, and draws all randomness
from the single ``--seed`` through named substreams, so a manifest is
sufficient to reproduce a run bit-for-bit (at a fixed thread count).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, assess, gridcube, interpret, pipeline, trainer
from .gridcube import SynthConfig, generate_synthetic, read_dataset, write_dataset
from .model import load_checkpoint, save_checkpoint
from .rng import substream_seed
from .trainer import StagedData, TrainConfig

_TRAIN_FLAGS = {
    "epochs": ("int", TrainConfig.epochs),
    "batch_size": ("int", TrainConfig.batch_size),
    "learning_rate": ("float", TrainConfig.learning_rate),
    "context": ("int", TrainConfig.context),
    "horizon": ("int", TrainConfig.horizon),
    "stride": ("int", TrainConfig.stride),
    "block": ("int", TrainConfig.block),
    "train_frac": ("float", TrainConfig.train_frac),
    "seed": ("int", TrainConfig.seed),
    "variant": ("str", TrainConfig.variant),
    "task": ("int", TrainConfig.task),
}
_TYPES = {"int": int, "float": float, "str": str}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    for name, (kind, default) in _TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        extra = {"choices": trainer.VARIANTS} if name == "variant" else {}
        parser.add_argument(
            flag,
            type=_TYPES[kind],
            default=argparse.SUPPRESS,
            dest=name,
            help=f"{name} (default: {default})",
            **extra,
        )
    parser.add_argument(
        "--config",
        default=argparse.SUPPRESS,
        help="key=value file applied between defaults and flags",
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--threads",
        type=int,
        default=argparse.SUPPRESS,
        help="torch thread cap (default: env SPD_THREADS or 2)",
    )


def _read_config_file(path: str) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    resolved: dict = {name: default for name, (_, default) in _TRAIN_FLAGS.items()}
    if hasattr(args, "config"):
        for key, value in _read_config_file(args.config).items():
            if key not in _TRAIN_FLAGS:
                raise gridcube.ConfigError(f"unknown config key {key!r}")
            kind = _TRAIN_FLAGS[key][0]
            resolved[key] = _TYPES[kind](value)
    for name in _TRAIN_FLAGS:
        if hasattr(args, name):
            resolved[name] = getattr(args, name)
    return TrainConfig(**resolved).resolved()


def _setup_threads(args: argparse.Namespace) -> int:
    import torch

    n = getattr(args, "threads", None)
    if n is None:
        n = int(os.environ.get("SPD_THREADS", "2"))
    torch.set_num_threads(max(1, n))
    return n


def _write_manifest(directory: Path, command: str, config: dict, seed, inputs, outputs, threads):
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "threads": threads,
        "version": __version__,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_run_config(ckpt_path: Path, args: argparse.Namespace) -> TrainConfig:
    """Rebuild the training config: checkpoint-side manifest, then flags."""
    resolved: dict = {name: default for name, (_, default) in _TRAIN_FLAGS.items()}
    manifest_path = ckpt_path.parent / "manifest.json"
    if manifest_path.exists():
        stored = json.loads(manifest_path.read_text()).get("config", {})
        for key, value in stored.items():
            if key in _TRAIN_FLAGS:
                resolved[key] = value
    if hasattr(args, "config"):
        for key, value in _read_config_file(args.config).items():
            resolved[key] = _TYPES[_TRAIN_FLAGS[key][0]](value)
    for name in _TRAIN_FLAGS:
        if hasattr(args, name):
            resolved[name] = getattr(args, name)
    if resolved["task"] is not None:
        resolved["task"] = int(resolved["task"])
    return TrainConfig(**resolved).resolved()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    cfg = SynthConfig(
        rows=args.rows,
        cols=args.cols,
        years=args.years,
        ocean_frac=args.ocean_frac,
        n_events=args.events,
        nan_frac=args.nan_frac,
        n_classes=args.classes,
    )
    cfg.validate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out.parent, "gen", asdict(cfg), args.seed, {}, {"dataset": str(out)}, threads=1
    )
    ds = generate_synthetic(cfg, args.seed)
    write_dataset(ds, out)
    print(f"wrote {out} ({out.stat().st_size} bytes, weeks={cfg.weeks})")
    return 0


def _cmd_train(args) -> int:
    threads = _setup_threads(args)
    cfg = _resolve_train_config(args)
    out = Path(args.out)
    _write_manifest(
        out, "train", asdict(cfg), cfg.seed, {"dataset": str(args.data)},
        {"checkpoint": str(out / "model.spck"), "loss_trace": str(out / "loss_trace.txt")},
        threads,
    )
    ds = read_dataset(args.data)
    result = trainer.train(ds, cfg)
    save_checkpoint(out / "model.spck", result.tensors)
    (out / "loss_trace.txt").write_text(result.loss_trace_text())
    (out / "split.txt").write_text(result.split.to_text())
    (out / "max_table.txt").write_text(result.staged.prepared.max_table.to_text())
    report = trainer.evaluate(
        result.model, result.staged.prepared, result.split, cfg,
        windows=result.eval_windows, staged=result.staged,
    )
    (out / "eval_report.txt").write_text(report.to_text())
    print(f"final epoch loss {result.loss_trace[-1]:.6f}; test total MAE x1e-3 {report.total * 1e3:.4f}")
    return 0


def _eval_setup(args):
    """Shared plumbing for eval/interpret/assess: model + prepared data."""
    ckpt_path = Path(args.ckpt)
    cfg = _load_run_config(ckpt_path, args)
    ds = read_dataset(args.data)
    prepared = pipeline.prepare(ds)
    staged = StagedData(prepared)
    model = trainer.model_from_checkpoint(load_checkpoint(ckpt_path), cfg, prepared.n_classes)
    split = pipeline.block_split(
        prepared.spec, cfg.block, cfg.train_frac, substream_seed(cfg.seed, "split")
    )
    windows = trainer._windows_for(cfg, prepared.weeks)[1]
    return ds, cfg, prepared, staged, model, split, windows


def _cmd_eval(args) -> int:
    threads = _setup_threads(args)
    ds, cfg, prepared, staged, model, split, windows = _eval_setup(args)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    _write_manifest(
        out, "eval", asdict(cfg), cfg.seed,
        {"dataset": str(args.data), "checkpoint": str(args.ckpt)},
        {"report": str(out / "eval_report.txt")}, threads,
    )
    report = trainer.evaluate(model, prepared, split, cfg, windows=windows, staged=staged)
    (out / "eval_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def _cmd_interpret(args) -> int:
    threads = _setup_threads(args)
    ds, cfg, prepared, staged, model, split, windows = _eval_setup(args)
    index = gridcube.INDEX_NAMES.index(args.index) if args.index in gridcube.INDEX_NAMES else int(args.index)
    week = args.week if args.week is not None else windows[-1].horizon_start
    out = Path(args.out)
    _write_manifest(
        out, "interpret",
        {**asdict(cfg), "index": index, "week": week, "lag": args.lag, "steps": args.steps},
        cfg.seed, {"dataset": str(args.data), "checkpoint": str(args.ckpt)},
        {"rasters": str(out)}, threads,
    )
    rasters = interpret.lag_attribution_grid(
        model, prepared, split, index, week, lag=args.lag, steps=args.steps, staged=staged
    )
    for name, grid in rasters.items():
        from .rasterout import write_raster

        write_raster(grid, out / f"ig_{gridcube.INDEX_NAMES[index]}_{name}")
    print(f"wrote {len(rasters)} attribution rasters to {out}")
    return 0


def _cmd_assess(args) -> int:
    threads = _setup_threads(args)
    ds, cfg, prepared, staged, model, split, windows = _eval_setup(args)
    out = Path(args.out)
    _write_manifest(
        out, "assess", {**asdict(cfg), "percentile": args.percentile, "week": args.week},
        cfg.seed, {"dataset": str(args.data), "checkpoint": str(args.ckpt)},
        {"report": str(out / "assessment.txt")}, threads,
    )
    result = assess.assess_soil_moisture_drought(
        model, ds.indices.values[..., assess.SM_INDEX], prepared, split, cfg, windows,
        percentile=args.percentile, staged=staged,
    )
    (out / "assessment.txt").write_text(result.report.to_text())
    if args.week is not None:
        for label, mask in (("observed", result.observed), ("predicted", result.predicted)):
            grid_drought = np.full((prepared.spec.rows, prepared.spec.cols), False)
            grid_defined = np.full((prepared.spec.rows, prepared.spec.cols), False)
            t = result.test_pixels
            grid_drought[t[:, 0], t[:, 1]] = mask.drought[:, args.week]
            grid_defined[t[:, 0], t[:, 1]] = mask.defined[:, args.week]
            assess.export_drought_mask(
                assess.DroughtMask(grid_drought, grid_defined), out / f"{label}_mask_w{args.week}"
            )
    print(result.report.to_text(), end="")
    return 0


def _cmd_ablate(args) -> int:
    threads = _setup_threads(args)
    cfg = _resolve_train_config(args)
    out = Path(args.out)
    _write_manifest(
        out, "ablate", asdict(cfg), cfg.seed, {"dataset": str(args.data)},
        {"importance": str(out / "importance.txt")}, threads,
    )
    ds = read_dataset(args.data)
    table = trainer.feature_importance_by_ablation(ds, cfg)
    (out / "importance.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spdrought",
        description="Spatiotemporal multi-task drought-index forecasting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset (DSG1)")
    p.add_argument("--rows", type=int, default=24, help="grid rows (default: 24)")
    p.add_argument("--cols", type=int, default=24, help="grid cols (default: 24)")
    p.add_argument("--years", type=int, default=11, help="years of weekly data (default: 11)")
    p.add_argument("--ocean-frac", type=float, default=0.3, help="ocean fraction (default: 0.3)")
    p.add_argument("--events", type=int, default=4, help="planted drought events (default: 4)")
    p.add_argument("--nan-frac", type=float, default=0.02, help="NaN injection rate (default: 0.02)")
    p.add_argument("--classes", type=int, default=8, help="land-cover classes (default: 8)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--out", required=True, help="output .dsg1 path")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train the forecasting model")
    p.add_argument("--data", required=True, help="input .dsg1 dataset")
    p.add_argument("--out", required=True, help="output run directory")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="model.spck path")
    p.add_argument("--out", default=None, help="report directory (default: checkpoint dir)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("interpret", help="integrated-gradient attribution rasters")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", default="sm", help="target index: sm, esi, sif (default: sm)")
    p.add_argument("--week", type=int, default=None, help="first horizon week (default: last window)")
    p.add_argument("--lag", type=int, default=1, help="context lag to export (default: 1)")
    p.add_argument("--steps", type=int, default=128, help="path steps (default: 128)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_interpret)

    p = sub.add_parser("assess", help="percentile-based drought classification")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=0.3, help="threshold percentile (default: 0.3)")
    p.add_argument("--week", type=int, default=None, help="export masks for this week")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_assess)

    p = sub.add_parser("ablate", help="feature importance by channel ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 1; usage errors exit 2 above
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
