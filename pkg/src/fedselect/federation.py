"""Synchronous FedAvg simulation over per-client selected data."""

from __future__ import annotations

import csv
import io
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .data import LabeledDataset
from .model import ModelSpec, evaluate, grad_minibatch, losses_batch, minibatch_size, sgd_step
from .numkit import RngStream

ROUND_CSV_HEADER = ("round", "accuracy", "global_loss", "participants", "cycle_time_s")


class NoParticipantsError(RuntimeError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_clients: int
    tau: int = 10
    eta: float = 0.01
    batch_fraction: float = 0.08
    rounds: int = 100

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class CommModel:
    uplink_bps: float = 1e6
    downlink_bps: float = 1e6
    model_size_bits: float = 1e6
    step_cost_s: float = 1e-3  # per sample per local step

    def __post_init__(self):
        if min(self.uplink_bps, self.downlink_bps, self.model_size_bits, self.step_cost_s) <= 0:
            raise ValueError("communication model parameters must be positive")


@dataclass
class ClientState:
    """One client: raw data, selected subset, local parameters and its own
    random stream for mini-batch sampling."""

    id: int
    raw: LabeledDataset
    selected: LabeledDataset
    rng: RngStream
    theta: Optional[np.ndarray] = None
    _order: np.ndarray = field(default=None, repr=False)
    _pos: int = field(default=0, repr=False)

    @property
    def excluded(self) -> bool:
        return len(self.selected) == 0

    def next_batch(self, size: int) -> np.ndarray:
        """Indices into ``selected`` drawn without replacement within an epoch.

        When fewer than ``size`` indices remain, a new epoch starts.
        """
        n = len(self.selected)
        if self._order is None or self._pos + size > n:
            self._order = self.rng.shuffle(n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + size]
        self._pos += size
        return idx


@dataclass(frozen=True)
class RoundReport:
    round: int
    accuracy: float
    global_loss: float
    participants: int
    cycle_time_s: float
    loss_delta: float = float("nan")

    def csv_row(self) -> list[str]:
        return [str(self.round), repr(self.accuracy), repr(self.global_loss), str(self.participants), repr(self.cycle_time_s)]


def local_update(
    spec: ModelSpec,
    client: ClientState,
    theta_global: np.ndarray,
    tau: int,
    eta: float,
    batch_fraction: float = 0.08,
) -> Optional[np.ndarray]:
    """``tau`` SGD steps from the global parameters; None if the client has no data."""
    if client.excluded:
        return None
    bs = minibatch_size(len(client.selected), batch_fraction)
    theta = np.array(theta_global, dtype=np.float64)
    data = client.selected
    for _ in range(tau):
        idx = client.next_batch(bs)
        theta = sgd_step(theta, grad_minibatch(spec, theta, data.x[idx], data.y[idx]), eta)
    client.theta = theta
    return theta


def aggregate(updates: Iterable[tuple[np.ndarray, float]]) -> np.ndarray:
    """Size-weighted mean of client parameters.

    Computed as ``theta_1 + sum_i p_i (theta_i - theta_1)`` with normalised
    weights ``p_i``, so identical inputs are a fixed point bit for bit and
    scaling every weight by the same integer leaves the result unchanged.
    """
    kept = [(np.asarray(t, dtype=np.float64), float(w)) for t, w in updates if w > 0]
    if not kept:
        raise NoParticipantsError("no update carries positive weight")
    shape = kept[0][0].shape
    if any(t.shape != shape for t, _ in kept):
        raise ValueError("parameter vectors differ in length")
    total = sum(w for _, w in kept)
    anchor = kept[0][0]
    acc = np.zeros(shape)
    for t, w in kept:
        acc += (w / total) * (t - anchor)
    return anchor + acc


def global_loss(spec: ModelSpec, theta: np.ndarray, clients: list[ClientState]) -> float:
    """Loss over the union of selected data, i.e. the size-weighted mean of
    per-client mean losses."""
    total = 0.0
    count = 0
    for c in sorted(clients, key=lambda c: c.id):
        if c.excluded:
            continue
        total += float(np.sum(losses_batch(spec, theta, c.selected.x, c.selected.y)))
        count += len(c.selected)
    return total / count if count else float("nan")


def cycle_time(comm: CommModel, clients: list[ClientState], config: FedConfig) -> float:
    """Slowest participating client's download + tau local steps + upload."""
    worst = 0.0
    for c in clients:
        bs = minibatch_size(len(c.selected), config.batch_fraction)
        if bs == 0:
            continue
        t = (
            comm.model_size_bits / comm.downlink_bps
            + config.tau * bs * comm.step_cost_s
            + comm.model_size_bits / comm.uplink_bps
        )
        worst = max(worst, t)
    return worst


def run_round(
    spec: ModelSpec,
    theta: np.ndarray,
    clients: list[ClientState],
    config: FedConfig,
    round_index: int = 0,
    testset: Optional[LabeledDataset] = None,
    comm: Optional[CommModel] = None,
    executor: Optional[Executor] = None,
) -> tuple[np.ndarray, RoundReport]:
    active = sorted((c for c in clients if not c.excluded), key=lambda c: c.id)
    if not active:
        raise NoParticipantsError("every client is excluded")

    def work(c: ClientState):
        return local_update(spec, c, theta, config.tau, config.eta, config.batch_fraction)

    if executor is None:
        results = [work(c) for c in active]
    else:
        results = list(executor.map(work, active))
    theta_next = aggregate((t, len(c.selected)) for t, c in zip(results, active))

    acc = evaluate(spec, theta_next, testset).accuracy if testset is not None else float("nan")
    report = RoundReport(
        round=round_index,
        accuracy=acc,
        global_loss=global_loss(spec, theta_next, active),
        participants=len(active),
        cycle_time_s=cycle_time(comm, active, config) if comm is not None else 0.0,
    )
    return theta_next, report


def run_training(
    spec: ModelSpec,
    theta0: np.ndarray,
    clients: list[ClientState],
    config: FedConfig,
    testset: LabeledDataset,
    comm: Optional[CommModel] = None,
    executor: Optional[Executor] = None,
    on_round: Optional[Callable[[int, np.ndarray], None]] = None,
) -> tuple[list[RoundReport], np.ndarray]:
    if config.rounds < 1:
        raise ValueError("at least one round is required")
    theta = np.array(theta0, dtype=np.float64)
    reports: list[RoundReport] = []
    prev = global_loss(spec, theta, clients)
    for t in range(config.rounds):
        theta, rep = run_round(spec, theta, clients, config, t + 1, testset, comm, executor)
        # convergence is reported, never used to stop
        rep = RoundReport(rep.round, rep.accuracy, rep.global_loss, rep.participants, rep.cycle_time_s, rep.global_loss - prev)
        prev = rep.global_loss
        reports.append(rep)
        if on_round is not None:
            on_round(t, theta)
    return reports, theta


def rounds_csv(reports: list[RoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()
