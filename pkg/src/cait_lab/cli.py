"""``cait-lab`` command line: train, sweep, verify, analyze, retrain.

Exit codes: 0 success, 1 divergence or numerical failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import tensor as T
from .blocks import ConfigError, LayerScale, SCALAR_STRATEGIES, parse_strategy, strategy_to_str
from .cait import CaitConfig, ClassAttentionStage, model_presets, toy_config
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import ManifestError, load_dataset
from .train import TrainConfig, retrain_fixed, train_run

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_DATA = "synthetic:seed=1,n=256,classes=2"

log = logging.getLogger("cait_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- manifest


def content_hash(text: str) -> str:
    """git blob id of ``text``."""
    raw = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def write_manifest(out: Path, command: str, resolved: dict, seed) -> dict:
    """Write ``manifest.json`` before anything else happens in ``out``."""
    inputs = json.dumps(resolved, sort_keys=True)
    manifest = {
        "command": command,
        "resolved": resolved,
        "seed": seed,
        "inputs_hash": content_hash(inputs),
        "out": str(out),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _limit_threads() -> None:
    raw = os.environ.get("CAIT_LAB_THREADS")
    if not raw:
        return
    n = int(raw)
    if n < 1:
        raise ConfigError("CAIT_LAB_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass


# ---------------------------------------------------------------- shared flags


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=DEFAULT_DATA,
                   help="manifest directory/file or synthetic:key=value,... (default %(default)s)")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-epochs", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--max-steps", type=int, default=None)


def _train_config(args, strategy) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
                       warmup_epochs=args.warmup_epochs, weight_decay=args.weight_decay, seed=args.seed,
                       strategy=strategy, label_smoothing=args.label_smoothing, max_steps=args.max_steps)


def _strategy(name: str, epsilon, allow_divergent: bool, config: CaitConfig):
    """Resolve a strategy name; for LayerScale the epsilon falls back to the config's."""
    if epsilon is None and name.startswith("layerscale"):
        epsilon = config.epsilon
    return parse_strategy(name, epsilon, allow_divergent)


def _init_value(strategy) -> str:
    if isinstance(strategy, LayerScale):
        return repr(getattr(strategy.init, "eps", 0.0))
    if isinstance(strategy, SCALAR_STRATEGIES):
        return repr(strategy.alpha0)
    return ""


def _dataset(spec: str, config: CaitConfig):
    ds = load_dataset(spec, image_size=config.image_size)
    if ds.num_classes > config.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, model head has {config.num_classes}")
    return ds


def _write(path: Path, text: str) -> None:
    path.write_text(text)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = model_presets(args.preset)
    if args.drop_rate is not None:
        config = config.replace(drop_rate=args.drop_rate)
    if args.num_classes is not None:
        config = config.replace(num_classes=args.num_classes)
    strategy = _strategy(args.strategy, args.epsilon, args.allow_divergent, config)
    if isinstance(strategy, LayerScale) and args.epsilon is not None:
        config = config.replace(epsilon=args.epsilon)
    tc = _train_config(args, strategy)
    out = Path(args.out)
    resolved = {"model": dict(config.to_items()), "train": dict(tc.to_items()), "data": args.data,
                "preset": args.preset}
    write_manifest(out, "train", resolved, args.seed)
    ds = _dataset(args.data, config)
    report = train_run(config, tc, ds)
    _save_run(out, report, {"command": "train", "preset": args.preset})
    print(f"final_loss={report.final_loss!r} final_accuracy={report.final_accuracy!r} "
          f"diverged={report.diverged} steps={report.steps}")
    if report.diverged:
        print(f"divergence: {report.reason}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _save_run(out: Path, report, meta: dict) -> None:
    meta = dict(meta, final_loss=repr(report.final_loss), final_accuracy=repr(report.final_accuracy),
                diverged=report.diverged, steps=report.steps)
    save_checkpoint(out / "checkpoint.ckpt", report.model, meta, report.rng_state)
    _write(out / "report.csv", report.to_csv())
    _write(out / "branch_ratios.csv", report.branch_ratios.to_csv())


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


SWEEP_COLUMNS = ["strategy", "depth", "seed", "epsilon", "drop_rate", "final_loss", "final_accuracy",
                 "diverged", "steps", "status"]


def cmd_sweep(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    depths, seeds = _int_list(args.depths), _int_list(args.seeds)
    for s in strategies:
        parse_strategy(s, None, args.allow_divergent)  # fail fast on unknown names
    cells = []
    for depth in depths:
        config = toy_config(depth)
        if args.drop_rate is not None:
            config = config.replace(drop_rate=args.drop_rate)
        for s in strategies:
            strategy = _strategy(s, args.epsilon, args.allow_divergent, config)
            for seed in seeds:
                cells.append((s, depth, seed, config, strategy))
    out = Path(args.out)
    resolved = {
        "cells": [{"strategy": strategy_to_str(st), "depth": d, "seed": sd, "drop_rate": c.drop_rate}
                  for _, d, sd, c, st in cells],
        "data": args.data,
        "train": dict(_train_config(args, None).to_items()),
    }
    write_manifest(out, "sweep", resolved, seeds)
    ds = None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for name, depth, seed, config, strategy in cells:
        args.seed = seed
        row = [name, depth, seed, _init_value(strategy), repr(config.drop_rate)]
        try:
            if ds is None:
                ds = _dataset(args.data, config)
            r = train_run(config, _train_config(args, strategy), ds)
            row += [repr(r.final_loss), repr(r.final_accuracy), int(r.diverged), r.steps, "ok"]
        except (ConfigError, T.NonFiniteError, ValueError) as exc:
            row += ["", "", "", 0, f"error: {exc}".replace("\n", " ")]
        w.writerow(row)
        log.info("cell %s depth %d seed %d done", name, depth, seed)
    _write(out / "sweep.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = list(SUITES) if not args.suites else [s.strip() for s in args.suites.split(",")]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; available: {', '.join(SUITES)}")
    if args.inject_failure and args.inject_failure not in SUITES:
        raise ConfigError(f"--inject-failure must name a suite: {', '.join(SUITES)}")
    out = Path(args.out)
    write_manifest(out, "verify", {"suites": names, "inject_failure": args.inject_failure or ""}, args.seed)
    results = run_suites(names, seed=args.seed, inject=args.inject_failure)
    lines = []
    for res in results:
        lines.append(f"{res.name}: {'PASS' if res.passed else 'FAIL'} ({res.detail}, {res.seconds:.2f}s)")
    text = "\n".join(lines) + "\n"
    _write(out / "verify.txt", text)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_analyze(args) -> int:
    from .analysis import (
        branch_ratios,
        export_maps,
        export_saliency,
        extract_attention,
        report_tables,
        saliency,
    )

    if args.checkpoint is None and not args.tables:
        raise UsageError("analyze needs --checkpoint and/or --tables")
    if args.checkpoint is not None and not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    out = Path(args.out)
    resolved = {"checkpoint": args.checkpoint or "", "tables": args.tables, "data": args.data,
                "image_index": args.image_index, "probe_size": args.probe_size, "mode": args.mode}
    if args.checkpoint:
        resolved["checkpoint_hash"] = content_hash(Path(args.checkpoint).read_bytes().hex())
    write_manifest(out, "analyze", resolved, None)
    if args.tables:
        _write(out / "tables.csv", report_tables())
        print(f"wrote {out / 'tables.csv'}")
    if args.checkpoint is None:
        return EXIT_OK
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data, model.config)
    ratios = branch_ratios(model, ds.images[: args.probe_size])
    _write(out / "branch_ratios.csv", ratios.to_csv())
    written = 1
    if isinstance(model.config.cls_policy, ClassAttentionStage):
        if not 0 <= args.image_index < len(ds):
            raise UsageError(f"--image-index {args.image_index} outside the dataset")
        image = ds.images[args.image_index]
        records = extract_attention(model, image)
        written += len(export_maps(model, records, out / "attention", prefix=f"img{args.image_index}"))
        for rec in records:
            sal = saliency(records, rec.layer_index, image, mode=args.mode, image_id=str(args.image_index))
            export_saliency(sal, out / f"saliency_img{args.image_index}_ca{rec.layer_index}.ppm")
            written += 1
    print(f"wrote {written} analysis files to {out}")
    return EXIT_FAILURE if ratios.flagged else EXIT_OK


def cmd_retrain(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    out = Path(args.out)
    tc = _train_config(args, None)
    resolved = {"checkpoint": args.checkpoint,
                "checkpoint_hash": content_hash(Path(args.checkpoint).read_bytes().hex()),
                "train": dict(tc.to_items()), "data": args.data}
    write_manifest(out, "retrain", resolved, args.seed)
    source, _, _ = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data, source.config)
    report = retrain_fixed(source, tc, ds)
    _save_run(out, report, {"command": "retrain", "source": args.checkpoint})
    print(f"final_loss={report.final_loss!r} final_accuracy={report.final_accuracy!r} "
          f"diverged={report.diverged} frozen={len(report.model.frozen)}")
    return EXIT_FAILURE if report.diverged else EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cait-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--preset", default="toy-12")
    p.add_argument("--strategy", default="layerscale")
    p.add_argument("--epsilon", type=float, default=None,
                   help="LayerScale init value, or initial alpha for scalar strategies")
    p.add_argument("--drop-rate", type=float, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--allow-divergent", action="store_true")
    p.add_argument("--out", default="runs/train")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="strategies x depths x seeds on toy models")
    p.add_argument("--strategies", default="baseline,layerscale")
    p.add_argument("--depths", default="12,24")
    p.add_argument("--seeds", default="0")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--drop-rate", type=float, default=None)
    p.add_argument("--allow-divergent", action="store_true")
    p.add_argument("--out", default="runs/sweep")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="gradient, invariant and serialization checks")
    p.add_argument("--suites", default="", help="comma-separated subset (default: all)")
    p.add_argument("--inject-failure", default=None, metavar="SUITE",
                   help="deliberately break one suite to test the failure path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="branch ratios, attention maps, saliency, size tables")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tables", action="store_true")
    p.add_argument("--data", default=DEFAULT_DATA)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--probe-size", type=int, default=16)
    p.add_argument("--mode", choices=("nearest", "bilinear"), default="nearest")
    p.add_argument("--out", default="runs/analyze")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("retrain", help="retrain with LayerScale diagonals frozen from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/retrain")
    _add_train_flags(p)
    p.set_defaults(func=cmd_retrain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads()
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
