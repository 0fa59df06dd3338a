"""Command-line entry point: ``attmil <command> [flags]``.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .dataio import (
    DatasetError,
    NpyFormatError,
    SynthSpec,
    generate_synthetic,
    import_openmic,
    load_dataset,
    save_dataset,
    save_npy,
)
from .evaluation import (
    EvalReport,
    aggregate_seeds,
    aggregation_to_csv,
    attention_json,
    attention_svg,
    evaluate,
    export_attention,
)
from .model import load_checkpoint
from .training import TrainConfig, ensure_val_split, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

CONFIG_HELP = """\
training config JSON (flat keys, all optional):
  batch_size (int, 128)   lr (float, 5e-4)      epochs (int, 250)
  seed (int, 0)           dropout (float, 0.6)  fc_hidden (list[int], [512, 512])
  alpha, beta, gamma (float, 1, 0, -1): loss normalization g(p) = alpha * p**gamma + beta
  val_fraction (float, 0.15): train bags moved to val when the dataset has no val split
  split_seed (int, 0): seed of that validation draw
  adam_beta1 (0.9), adam_beta2 (0.999), adam_eps (1e-8)
precedence: built-in defaults < config file < command-line flags (--seed, --epochs)
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def atomic_dir(target):
    """Yield a temp directory that replaces ``target`` only if the block succeeds."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot load checkpoint: {exc}") from None


def _check_dims(manifest: dict, dataset) -> None:
    hyper = manifest["hyper"]
    if hyper["n_labels"] != dataset.n_labels or hyper["dim"] != dataset.feature_dim:
        raise DatasetError(
            f"checkpoint expects L={hyper['n_labels']}, D={hyper['dim']}; "
            f"dataset has L={dataset.n_labels}, D={dataset.feature_dim}"
        )


def cmd_convert(args) -> int:
    if args.classmap is None:
        print("warning: no --classmap; using positional label names", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="no class map")
        ds = import_openmic(args.npz, args.train_split, args.test_split, args.classmap)
    with atomic_dir(args.out) as tmp:
        save_dataset(ds, tmp)
    print(f"N={ds.n_bags} L={ds.n_labels} R={ds.bag_size} D={ds.feature_dim}")
    print("label\tobserved\tpositive")
    for j, name in enumerate(ds.label_names):
        print(f"{name}\t{int(ds.mask[:, j].sum())}\t{int(ds.labels[:, j].sum())}")
    return 0


def cmd_synth(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        spec = SynthSpec(**raw)
    except TypeError as exc:
        raise DatasetError(f"{args.spec}: {exc}") from None
    ds, truth = generate_synthetic(spec)
    with atomic_dir(args.out) as tmp:
        save_dataset(ds, tmp)
        save_npy(tmp / "truth.npy", truth.astype(np.uint8))
    print(f"N={ds.n_bags} L={ds.n_labels} R={ds.bag_size} D={ds.feature_dim} splits={ds.split_counts()}")
    return 0


def cmd_train(args) -> int:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    ds = ensure_val_split(load_dataset(args.data), cfg)
    with atomic_dir(args.out) as tmp:
        cfg = dataclasses.replace(cfg, checkpoint_dir=str(tmp / "checkpoint"))
        result = train(args.model, ds, cfg)
        (tmp / "history.csv").write_text(result.history_csv(), encoding="utf-8")
    print(f"model={args.model} seed={cfg.seed} params={result.model.census()} "
          f"best_epoch={result.best_epoch} best_val_loss={result.best_val_loss:.6f}")
    return 0


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    return p / "checkpoint" if (p / "checkpoint" / "manifest.json").exists() else p


def cmd_evaluate(args) -> int:
    model, manifest = _load_model(_resolve_checkpoint(args.checkpoint))
    ds = load_dataset(args.data)
    _check_dims(manifest, ds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = evaluate(model, ds, args.split, args.threshold, seed=manifest.get("seed"))
    for w in {str(c.message) for c in caught}:
        print(f"warning: {w}", file=sys.stderr)
    atomic_write_text(args.out, report.to_csv())
    print("label\tmacro_P\tmacro_R\tmacro_F1")
    for name in report.label_names:
        m = report.per_label[name]
        print(f"{name}\t{m['macro_P']:.4f}\t{m['macro_R']:.4f}\t{m['macro_F1']:.4f}")
    o = report.overall
    print(f"OVERALL\t{o['macro_P']:.4f}\t{o['macro_R']:.4f}\t{o['macro_F1']:.4f}")
    return 0


def cmd_attention(args) -> int:
    model, manifest = _load_model(_resolve_checkpoint(args.checkpoint))
    ds = load_dataset(args.data)
    _check_dims(manifest, ds)
    keys = [k for k in args.keys.split(",") if k]
    try:
        export = export_attention(model, ds, keys)
    except KeyError as exc:
        raise DatasetError(str(exc.args[0])) from None
    with atomic_dir(args.out) as tmp:
        (tmp / "attention.json").write_text(attention_json(export), encoding="utf-8")
        if args.svg:
            for key in keys:
                recs = [r for r in export["records"] if r["sample_key"] == key]
                (tmp / f"{key}.svg").write_text(attention_svg(recs), encoding="utf-8")
    print(f"exported attention for {len(keys)} samples x {ds.n_labels} labels")
    return 0


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        p = Path(run)
        path = p / "eval.csv" if p.is_dir() else p
        if not path.exists():
            raise DatasetError(f"{run}: no evaluation CSV (expected {path})")
        reports.append(EvalReport.from_csv(path.read_text(encoding="utf-8")))
    try:
        rows = aggregate_seeds(reports)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    atomic_write_text(args.out, aggregation_to_csv(rows))
    print("metric\tmin\tq1\tmedian\tq3\tmax\tmean")
    for r in rows:
        print("\t".join([r["metric"]] + [f"{r[c]:.4f}" for c in ("min", "q1", "median", "q3", "max", "mean")]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attmil", description="Attention-pooled multi-instance multi-label classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="import the OpenMIC NPZ release into the dataset format")
    p.add_argument("--npz", required=True, help="openmic-2018.npz")
    p.add_argument("--train-split", required=True, help="CSV of train sample keys, one per line")
    p.add_argument("--test-split", required=True, help="CSV of test sample keys, one per line")
    p.add_argument("--classmap", help="JSON mapping label name -> column index (default: label_00..)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted instance truth")
    p.add_argument("--spec", required=True, help="JSON with SynthSpec fields (n_bags, n_labels, bag_size, "
                   "feature_dim, positives_per_bag, label_rate, observe_rate, noise_scale, test_fraction, seed)")
    p.add_argument("--out", required=True, help="output dataset directory (also gets truth.npy)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="training config JSON (schema below)")
    p.add_argument("--model", choices=["att", "fc_t", "fc"], default="att", help="architecture")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--epochs", type=int, help="overrides the config epochs")
    p.add_argument("--out", required=True, help="run directory: checkpoint/ and history.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.5, help="positive iff score > threshold")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attention", help="export attention weights (JSON, optional SVG)")
    p.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--keys", required=True, help="comma-separated sample keys")
    p.add_argument("--svg", action="store_true", help="also write <key>.svg bar strips")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("report", help="box-plot statistics across seeds")
    p.add_argument("--runs", nargs="+", required=True,
                   help="report CSVs, or run directories containing eval.csv")
    p.add_argument("--out", required=True, help="aggregation CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"attmil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nd.NumericalError as exc:
        print(f"attmil {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, NpyFormatError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"attmil {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
