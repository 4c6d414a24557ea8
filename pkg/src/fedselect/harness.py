"""End-to-end experiment: benchmark model, loss-based selection, federated
training on the selected data, and the comparison baselines."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .data import (
    LabeledDataset,
    corrupt_closedset,
    load_idx_pair,
    mix_openset,
    partition_noniid,
    split_benchmark,
    synth_gaussian,
)
from .federation import (
    ClientState,
    CommModel,
    FedConfig,
    RoundReport,
    cycle_time,
    rounds_csv,
    run_training,
)
from .model import Hyper, ModelSpec, evaluate, init_params, losses_batch, train_centralized
from .numkit import RngStream
from .selection import (
    SelectionQuality,
    ThresholdResult,
    find_threshold,
    kept_indices,
    merge_losses,
    score_losses,
    selection_metrics,
)

log = logging.getLogger(__name__)

VARIANTS = ("selected", "no-selection", "clean-ideal", "benchmark-only")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Flat key/value experiment description; every field is a config key."""

    seed: int = 0
    source: str = "synthetic"  # synthetic | idx
    # synthetic source
    synth_classes: int = 3
    synth_dims: int = 2
    synth_per_class: int = 300
    synth_test_per_class: int = 200
    centers_scale: float = 6.0
    noise_shift: float = 6.0
    layout_seed: int = 0
    # idx source
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    noise_images: str = ""
    noise_labels: str = ""
    # noise
    noise_mode: str = "open-set"  # none | open-set | closed-set
    noise_ratio: float = 3.0
    closed_offset: int = 2
    closed_label_lo: int = 0
    closed_label_hi: int = 0
    closed_client_fraction: float = 0.75
    # benchmark
    benchmark_fraction: float = 0.03
    train_share: float = 0.5
    benchmark_epochs: int = 200
    benchmark_eta: float = 0.01
    benchmark_batch_fraction: float = 0.08
    # model
    hidden: list = field(default_factory=lambda: [16])
    # federation
    clients: int = 20
    rounds: int = 100
    tau: int = 10
    eta: float = 0.01
    batch_fraction: float = 0.08
    # analytic timing; model_size_bits <= 0 means 64 bits per parameter
    uplink_bps: float = 1e6
    downlink_bps: float = 1e6
    model_size_bits: float = 0.0
    step_cost_s: float = 1e-3
    # variants
    run_no_selection: bool = True
    run_clean_ideal: bool = True
    run_benchmark_only: bool = True
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        raw = dict(raw)
        raw.pop("version", None)
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**{k: _coerce(names[k], v) for k, v in raw.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def override(self, key: str, value: str) -> "ExperimentConfig":
        names = {f.name: f for f in dataclasses.fields(self)}
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        data = self.to_dict()
        data.pop("version")
        data[key] = _parse_text(names[key], value)
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["version"] = __version__
        return d

    def validate(self) -> None:
        checks = [
            (self.source in ("synthetic", "idx"), "source must be 'synthetic' or 'idx'"),
            (self.noise_mode in ("none", "open-set", "closed-set"), "noise_mode must be none, open-set or closed-set"),
            (0 < self.benchmark_fraction < 1, "benchmark_fraction must lie in (0, 1)"),
            (0 < self.train_share < 1, "train_share must lie in (0, 1)"),
            (0 < self.batch_fraction <= 1, "batch_fraction must lie in (0, 1]"),
            (0 < self.benchmark_batch_fraction <= 1, "benchmark_batch_fraction must lie in (0, 1]"),
            (self.tau >= 1, "tau must be >= 1"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.clients >= 1, "clients must be >= 1"),
            (self.eta > 0 and self.benchmark_eta > 0, "learning rates must be positive"),
            (self.noise_ratio > 0, "noise_ratio must be positive"),
            (0 <= self.closed_client_fraction <= 1, "closed_client_fraction must lie in [0, 1]"),
            (0 <= self.closed_label_lo <= self.closed_label_hi, "need 0 <= closed_label_lo <= closed_label_hi"),
            (all(int(h) >= 1 for h in self.hidden), "hidden sizes must be positive"),
            (min(self.uplink_bps, self.downlink_bps, self.step_cost_s) > 0, "link rates and step cost must be positive"),
        ]
        if self.source == "synthetic":
            checks.append((min(self.synth_classes, self.synth_dims, self.synth_per_class, self.synth_test_per_class) >= 1,
                           "synthetic sizes must be positive"))
        else:
            checks.append((all([self.train_images, self.train_labels, self.test_images, self.test_labels]),
                           "idx source needs train/test image and label paths"))
            if self.noise_mode == "open-set":
                checks.append((bool(self.noise_images and self.noise_labels), "open-set noise on idx data needs noise files"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def _coerce(f: dataclasses.Field, v: Any) -> Any:
    kind = type(f.default) if f.default is not dataclasses.MISSING else list
    try:
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind is int:
            if isinstance(v, bool) or float(v) != int(v):
                raise TypeError
            return int(v)
        if kind is float:
            return float(v)
        if kind is list:
            return [int(h) for h in v]
        return str(v)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {f.name!r}: cannot use {v!r}") from None


def _parse_text(f: dataclasses.Field, text: str) -> Any:
    kind = type(f.default) if f.default is not dataclasses.MISSING else list
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {f.name!r}: {text!r} is not a boolean")
    if kind is list:
        return [int(t) for t in text.split(",") if t]
    if kind in (int, float):
        try:
            return float(text) if kind is float else int(text)
        except ValueError:
            raise ConfigError(f"config key {f.name!r}: {text!r} is not a number") from None
    return text


@dataclass
class MetricsRecord:
    variant: str
    reports: list[RoundReport]
    lambda_star: Optional[float] = None
    kept_counts: Optional[list[int]] = None
    precision: Optional[float] = None
    recall: Optional[float] = None

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].accuracy

    @property
    def mean_cycle_time(self) -> float:
        return float(np.mean([r.cycle_time_s for r in self.reports]))


@dataclass
class SelectionOutcome:
    """Everything steps 1-8 produce; the training stage consumes it."""

    spec: ModelSpec
    theta0: np.ndarray
    theta_b: np.ndarray
    benchmark_train: LabeledDataset
    testset: LabeledDataset
    raw_clients: list[LabeledDataset]
    selected_clients: list[LabeledDataset]
    threshold: ThresholdResult
    quality: SelectionQuality
    kept: list[np.ndarray]

    @property
    def kept_counts(self) -> list[int]:
        return [len(c) for c in self.selected_clients]

    @property
    def raw_counts(self) -> list[int]:
        return [len(c) for c in self.raw_clients]


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.debug("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def _load_sources(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, Optional[LabeledDataset]]:
    """(clean training pool, clean test set, open-set noise source or None)."""
    seed = cfg.seed
    if cfg.source == "synthetic":
        kw = dict(classes=cfg.synth_classes, dims=cfg.synth_dims, centers_scale=cfg.centers_scale,
                  layout_seed=cfg.layout_seed)
        clean = synth_gaussian(per_class=cfg.synth_per_class, noise_shift=0.0,
                               stream=RngStream(seed, "target-train"), **kw)
        test = synth_gaussian(per_class=cfg.synth_test_per_class, noise_shift=0.0,
                              stream=RngStream(seed, "target-test"), **kw)
        noise = None
        if cfg.noise_mode == "open-set":
            # the jittered split never asks for more than 3x ratio per label
            per = math.ceil(3 * cfg.noise_ratio * cfg.synth_per_class) + 1
            noise = synth_gaussian(per_class=per, noise_shift=cfg.noise_shift,
                                   stream=RngStream(seed, "noise-source"), **kw)
        return clean, test, noise
    clean = load_idx_pair(cfg.train_images, cfg.train_labels)
    test = load_idx_pair(cfg.test_images, cfg.test_labels, clean.num_classes)
    noise = None
    if cfg.noise_mode == "open-set":
        noise = load_idx_pair(cfg.noise_images, cfg.noise_labels)
    return clean, test, noise


def run_selection(cfg: ExperimentConfig) -> SelectionOutcome:
    seed = cfg.seed
    with _Stage("load"):
        clean, testset, noise_source = _load_sources(cfg)
    with _Stage("benchmark-split"):
        split, pool = split_benchmark(clean, cfg.benchmark_fraction, cfg.train_share, RngStream(seed, "benchmark"))
    with _Stage("partition"):
        plan = partition_noniid(pool, cfg.clients, RngStream(seed, "partition"))
        clients = plan.apply(pool)
    with _Stage("noise"):
        if cfg.noise_mode == "open-set":
            clients = mix_openset(clients, noise_source, cfg.noise_ratio, RngStream(seed, "noise-mix"),
                                  "synthetic-shifted" if cfg.source == "synthetic" else Path(cfg.noise_images).name)
        elif cfg.noise_mode == "closed-set":
            if cfg.closed_label_hi >= clean.num_classes:
                raise ConfigError(f"closed_label_hi {cfg.closed_label_hi} outside {clean.num_classes} classes")
            clients = corrupt_closedset(clients, cfg.closed_offset, (cfg.closed_label_lo, cfg.closed_label_hi),
                                        cfg.closed_client_fraction, RngStream(seed, "closed-set"))
    with _Stage("benchmark-model"):
        spec = ModelSpec((clean.dim, *cfg.hidden, clean.num_classes))
        theta0 = init_params(spec, RngStream(seed, "init"))
        hyper = Hyper(cfg.benchmark_eta, cfg.benchmark_epochs, cfg.benchmark_batch_fraction)
        # same stream label as theta0, so the benchmark starts from theta0 too
        theta_b = train_centralized(spec, split.train, hyper, RngStream(seed, "init"))
    with _Stage("scoring"):
        V = score_losses(spec, theta_b, split.test)
        client_losses = [score_losses(spec, theta_b, c, origin=n) for n, c in enumerate(clients)]
    with _Stage("threshold"):
        P = merge_losses(client_losses)
        threshold = find_threshold(V, P)
    with _Stage("filter"):
        kept = [kept_indices(ls, threshold.lambda_star) for ls in client_losses]
        selected = [c.subset(k) for c, k in zip(clients, kept)]
        quality = selection_metrics(kept, [np.flatnonzero(c.clean_mask()) for c in clients])
    return SelectionOutcome(spec, theta0, theta_b, split.train, testset, clients, selected, threshold, quality, kept)


def clean_only(clients: list[LabeledDataset]) -> list[LabeledDataset]:
    """Target samples that were neither mixed in nor relabelled."""
    return [c.subset(np.flatnonzero(c.clean_mask())) for c in clients]


def _client_states(seed: int, datasets: list[LabeledDataset], raws: list[LabeledDataset]) -> list[ClientState]:
    return [ClientState(n, raw, d, RngStream(seed, f"client-{n}-batches")) for n, (d, raw) in enumerate(zip(datasets, raws))]


def run_pipeline(cfg: ExperimentConfig, workers: int = 1, write: bool = True) -> list[MetricsRecord]:
    cfg.validate()
    sel = run_selection(cfg)
    spec = sel.spec
    fed = FedConfig(cfg.clients, cfg.tau, cfg.eta, cfg.batch_fraction, cfg.rounds)
    model_bits = cfg.model_size_bits if cfg.model_size_bits > 0 else 64.0 * spec.num_params
    comm = CommModel(cfg.uplink_bps, cfg.downlink_bps, model_bits, cfg.step_cost_s)

    variants: list[tuple[str, list[LabeledDataset]]] = [("selected", sel.selected_clients)]
    if cfg.run_no_selection:
        variants.append(("no-selection", sel.raw_clients))
    if cfg.run_clean_ideal:
        variants.append(("clean-ideal", clean_only(sel.raw_clients)))

    records = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for name, datasets in variants:
            with _Stage(f"train:{name}"):
                states = _client_states(cfg.seed, datasets, sel.raw_clients)
                reports, _ = run_training(spec, sel.theta0, states, fed, sel.testset, comm, executor)
            rec = MetricsRecord(name, reports)
            if name == "selected":
                rec.lambda_star = sel.threshold.lambda_star
                rec.kept_counts = sel.kept_counts
                rec.precision = sel.quality.precision
                rec.recall = sel.quality.recall
            records.append(rec)
    finally:
        if executor is not None:
            executor.shutdown()

    if cfg.run_benchmark_only:
        with _Stage("train:benchmark-only"):
            ev = evaluate(spec, sel.theta_b, sel.testset)
            train_loss = float(np.mean(losses_batch(spec, sel.theta_b, sel.benchmark_train.x, sel.benchmark_train.y)))
            reports = [RoundReport(t + 1, ev.accuracy, train_loss, 0, 0.0) for t in range(cfg.rounds)]
            records.append(MetricsRecord("benchmark-only", reports))
    if write:
        with _Stage("report"):
            emit_report(records, cfg, sel)
    return records


def summary_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "final_accuracy", "lambda_star", "kept", "precision", "recall", "mean_cycle_time_s"])
    opt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    for r in records:
        kept = "" if r.kept_counts is None else str(sum(r.kept_counts))
        w.writerow([r.variant, repr(r.final_accuracy), opt(r.lambda_star), kept, opt(r.precision), opt(r.recall),
                    repr(r.mean_cycle_time)])
    return buf.getvalue()


def selection_json(sel: SelectionOutcome) -> dict[str, Any]:
    return {
        "lambda_star": sel.threshold.lambda_star,
        "g_min": sel.threshold.g_min,
        "candidates_evaluated": sel.threshold.candidates_evaluated,
        "precision": sel.quality.precision,
        "recall": sel.quality.recall,
        "nothing_kept": sel.quality.nothing_kept,
        "raw_counts": sel.raw_counts,
        "kept_counts": sel.kept_counts,
    }


def emit_report(records: list[MetricsRecord], cfg: ExperimentConfig, sel: Optional[SelectionOutcome] = None) -> list[Path]:
    if not records:
        raise ValueError("nothing to report")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str):
        path = out / name
        path.write_text(text)
        written.append(path)

    for r in records:
        put(f"rounds_{r.variant}.csv", rounds_csv(r.reports))
    put("summary.csv", summary_csv(records))
    if sel is not None:
        put("selection.json", json.dumps(selection_json(sel), indent=2) + "\n")
    put("manifest.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return written
