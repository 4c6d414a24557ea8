"""Command line entry point.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import IdxParseError, parse_idx, partition_noniid, split_benchmark
from .harness import ConfigError, ExperimentConfig, PipelineError, _load_sources, run_pipeline, run_selection
from .numkit import RngStream


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedselect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="JSON config file (a run manifest works too)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    experiment("select", "benchmark model + threshold search; print lambda* and kept counts")
    train = experiment("train", "full pipeline including federated training and baselines")
    train.add_argument("--workers", type=int, default=1, help="threads for client updates")
    experiment("partition", "dry-run the non-iid partition and print per-client stats")

    info = sub.add_parser("idx-info", help="parse an IDX file and describe it")
    info.add_argument("path")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = cfg.override(key.strip(), value.strip())
    if args.seed is not None:
        cfg = cfg.override("seed", str(args.seed))
    if args.out is not None:
        cfg = cfg.override("out_dir", args.out)
    return cfg


def _idx_info(path: str) -> int:
    blob = Path(path).read_bytes()
    dims, tensor = parse_idx(blob)
    magic = int.from_bytes(blob[:4], "big")
    print(f"file:  {path}")
    print(f"magic: 0x{magic:08x}")
    print(f"count: {dims[0]}")
    print(f"dims:  {' x '.join(map(str, dims))}")
    if len(dims) == 1 and dims[0]:
        labels, counts = np.unique(tensor, return_counts=True)
        print("labels: " + " ".join(f"{int(l)}:{int(c)}" for l, c in zip(labels, counts)))
    return 0


def _select(cfg: ExperimentConfig) -> int:
    sel = run_selection(cfg)
    kept, raw = sum(sel.kept_counts), sum(sel.raw_counts)
    print(f"lambda*: {sel.threshold.lambda_star!r}")
    print(f"ks distance: {sel.threshold.g_min!r} ({sel.threshold.candidates_evaluated} candidates)")
    print(f"kept: {kept}/{raw} ({kept / raw if raw else 0.0:.4f})")
    print(f"precision: {sel.quality.precision:.4f}  recall: {sel.quality.recall:.4f}")
    for n, (k, r) in enumerate(zip(sel.kept_counts, sel.raw_counts)):
        print(f"client {n}: kept {k}/{r}")
    return 0


def _partition(cfg: ExperimentConfig) -> int:
    clean, _, _ = _load_sources(cfg)
    _, pool = split_benchmark(clean, cfg.benchmark_fraction, cfg.train_share, RngStream(cfg.seed, "benchmark"))
    plan = partition_noniid(pool, cfg.clients, RngStream(cfg.seed, "partition"))
    sizes = np.bincount(plan.assignment, minlength=plan.num_clients)
    per_label = np.bincount(np.array(plan.client_labels), minlength=clean.num_classes)
    print(f"pool: {len(pool)} samples, {plan.num_clients} clients, {clean.num_classes} labels")
    print("clients per label: " + " ".join(map(str, per_label)))
    print(f"client sizes: min {sizes.min()} max {sizes.max()} mean {sizes.mean():.1f}")
    for n, (lab, s) in enumerate(zip(plan.client_labels, sizes)):
        print(f"client {n}: label {lab}, {s} samples")
    return 0


def _train(cfg: ExperimentConfig, workers: int) -> int:
    records = run_pipeline(cfg, workers=workers)
    for r in records:
        extra = f"  lambda*={r.lambda_star:.6g}" if r.lambda_star is not None else ""
        print(f"{r.variant:15s} final accuracy {r.final_accuracy:.4f}  mean cycle {r.mean_cycle_time:.4g}s{extra}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "idx-info":
        try:
            return _idx_info(args.path)
        except (OSError, IdxParseError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "select":
            return _select(cfg)
        if args.command == "partition":
            return _partition(cfg)
        return _train(cfg, args.workers)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
