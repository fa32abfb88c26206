"""Command-line entry point: gen | train | eval | attend | bench | entropy-check.

Exit codes: 0 success, 1 a checked property or metric failed, 2 usage or
input error. Logs go to stderr; data goes to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import MODES, exact_self_attention, nystrom_attention
from .data import PRESETS, generate_synthetic_dataset, load_split, read_bag, write_dataset
from .errors import FormatError, ParameterError
from .mil import entropy_sweep
from .model import TransMILModel, export_heatmap, load_checkpoint, save_checkpoint, tpt_forward
from .tensor import Tensor
from .train import TrainConfig, UndefinedMetricError, evaluate, train_loop

log = logging.getLogger("transmil")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = PRESETS[args.preset]
    overrides = {
        "bag_count": args.bags,
        "seed": args.seed,
        "witness_rate": args.witness_rate,
        "cluster_separation": args.separation,
        "feature_dim": args.feature_dim,
        "class_count": args.classes,
        "instances_per_bag": tuple(args.instances) if args.instances else None,
    }
    if args.no_spatial:
        overrides["spatial_clustering"] = False
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    ds = generate_synthetic_dataset(cfg)
    records = write_dataset(ds, args.out, seed=args.seed)
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    print(f"bags={len(records)} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


def _manifest(data_dir) -> Path:
    path = Path(data_dir) / "manifest.csv"
    if not path.is_file():
        raise UsageError(f"no manifest at {path}")
    return path


def cmd_train(args) -> int:
    manifest = _manifest(args.data)
    train_bags, val_bags = load_split(manifest, "train"), load_split(manifest, "val")
    if not train_bags or not val_bags:
        raise UsageError(f"{manifest} needs non-empty train and val splits")
    classes = max(b.label for b in (*train_bags, *val_bags)) + 1
    model = TransMILModel(
        train_bags[0].dim,
        args.dim,
        args.heads,
        args.landmarks,
        classes=max(classes, 2),
        seed=args.seed,
        pos_encoding=args.pos_encoding,
        dropout=args.dropout,
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        lookahead_k=args.lookahead_k,
        lookahead_alpha=args.lookahead_alpha,
        mode=args.mode,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, report = train_loop(train_bags, val_bags, model, cfg, out / "log.csv")
    save_checkpoint(model, out / "model.tmil")
    print(f"best_epoch={report.best_epoch} val_auc={report.best_val_auc:.4f} val_acc={report.accuracy:.4f}")
    return EXIT_OK


def _load_model(path) -> TransMILModel:
    if not Path(path).is_file():
        raise UsageError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    bags = load_split(_manifest(args.data), args.split)
    if not bags:
        raise UsageError(f"split {args.split!r} is empty")
    if bags[0].dim != model.in_dim:
        raise UsageError(f"bags have width {bags[0].dim} but the checkpoint expects {model.in_dim}")
    try:
        res = evaluate(model, bags, args.mode, workers=args.workers)
    except UndefinedMetricError as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    print(f"accuracy={res['accuracy']:.4f} auc={res['auc']:.4f}")
    report = {
        "split": args.split,
        "bags": len(bags),
        "accuracy": res["accuracy"],
        "auc": res["auc"],
        "per_class_auc": res["per_class_auc"],
    }
    report_path = Path(args.report) if args.report else Path(args.ckpt).with_name("report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# attend


def write_heatmap_files(record, stem: Path) -> tuple[Path, Path]:
    csv_path = stem.with_name(stem.name + ".heatmap.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("instance", "row", "col", "score"))
        for i, (r, c, s) in enumerate(zip(record.rows, record.cols, record.scores)):
            w.writerow((i, int(r), int(c), repr(float(s))))
    side = record.side
    grid = np.zeros(side * side, dtype=np.int64)
    grid[: record.scores.size] = np.floor(record.scores * 255 + 0.5).astype(np.int64)
    lines = ["P2", f"{side} {side}", "255"]
    lines += [" ".join(map(str, row)) for row in grid.reshape(side, side)]
    pgm_path = stem.with_name(stem.name + ".pgm")
    pgm_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return csv_path, pgm_path


def cmd_attend(args) -> int:
    model = _load_model(args.ckpt)
    if not Path(args.bag).is_file():
        raise UsageError(f"no bag file at {args.bag}")
    bag = read_bag(args.bag)
    if bag.dim != model.in_dim:
        raise UsageError(f"bag has width {bag.dim} but the checkpoint expects {model.in_dim}")
    logits, attn = tpt_forward(bag.instances, model, args.mode)
    side = math.isqrt(bag.n - 1) + 1
    record = export_heatmap(attn, bag.n, side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = write_heatmap_files(record, out / bag.id)
    print(f"wrote {csv_path} {pgm_path} logits={np.array2string(logits.data, precision=4)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def bench_attention(sizes, dim=64, landmarks=64, repeats=3, seed=0) -> list[tuple[int, str, float]]:
    """Best-of-``repeats`` wall time (ms) of one attention forward per (n, mode)."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        q, k, v = (Tensor(rng.normal(size=(n, dim))) for _ in range(3))
        for mode in MODES:
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                if mode == "exact":
                    exact_self_attention(q, k, v)
                else:
                    nystrom_attention(q, k, v, landmarks)
                best = min(best, time.perf_counter() - t0)
            rows.append((n, mode, best * 1e3))
    return rows


def growth_ratios(rows) -> dict[str, float]:
    by_mode: dict[str, dict[int, float]] = {}
    for n, mode, ms in rows:
        by_mode.setdefault(mode, {})[n] = ms
    return {mode: t[max(t)] / t[min(t)] for mode, t in by_mode.items()}


def cmd_bench(args) -> int:
    rows = bench_attention(args.sizes, args.dim, args.landmarks, args.repeats, args.seed)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("n", "mode", "millis"))
        for n, mode, ms in rows:
            w.writerow((n, mode, f"{ms:.3f}"))
    lo, hi = min(args.sizes), max(args.sizes)
    for mode, ratio in growth_ratios(rows).items():
        print(f"{mode}: t({hi})/t({lo}) = {ratio:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entropy-check


def cmd_entropy_check(args) -> int:
    report = entropy_sweep(args.trials, tuple(args.sizes), args.seed, args.tol)
    print(
        f"trials={args.trials} sizes={','.join(map(str, args.sizes))} "
        f"chain_gap={report.worst_chain_gap:.3e} product_gap={report.worst_product_gap:.3e} "
        f"max_slack={report.max_slack:.4f} violations={len(report.violations)}"
    )
    for kind, n, table, amount in report.violations:
        print(f"VIOLATION {kind} n={n} by {amount:.3e}: {table.reshape(-1).tolist()}")
    return EXIT_OK if report.ok else EXIT_FAILED


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset and manifest")
    p.add_argument("--preset", choices=sorted(PRESETS), default="camelyon-like")
    p.add_argument("--bags", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--witness-rate", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--instances", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--no-spatial", action="store_true", help="scatter witnesses instead of a contiguous block")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and write model.tmil + log.csv")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--lookahead-k", type=int, default=5)
    p.add_argument("--lookahead-alpha", type=float, default=0.5)
    p.add_argument("--mode", choices=MODES, default="nystrom")
    p.add_argument("--landmarks", type=_positive_int, default=64)
    p.add_argument("--heads", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=512)
    p.add_argument("--pos-encoding", choices=("ppeg", "sinusoidal", "none"), default="ppeg")
    p.add_argument("--dropout", type=float, default=0.0, help="rate on each attention output during training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print accuracy and AUC on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--mode", choices=MODES, default="nystrom")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--report", help="JSON report path (default: report.json beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="export a class-attention heatmap for one bag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--mode", choices=MODES, default="nystrom")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("bench", help="time exact vs Nystrom attention")
    p.add_argument("--sizes", type=_positive_int, nargs="+", default=[1024, 2048, 4096])
    p.add_argument("--dim", type=_positive_int, default=64)
    p.add_argument("--landmarks", type=_positive_int, default=64)
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("entropy-check", help="joint vs marginal entropy sweep")
    p.add_argument("--trials", type=_positive_int, default=1000)
    p.add_argument("--sizes", type=_positive_int, nargs="+", default=[2, 3, 4])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_entropy_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    print("settings: " + " ".join(f"{k}={v}" for k, v in settings.items()), file=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ParameterError, FormatError, FileNotFoundError) as exc:
        print(f"transmil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
