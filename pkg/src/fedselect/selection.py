"""Loss-distribution based data selection.

The benchmark model scores every sample. Its losses on held-out benchmark data
form the reference set ``V``; the union of client losses forms ``P``. For a
cut-off ``lam`` the client distribution is conditioned on ``loss <= lam`` and
compared with ``V`` by the Kolmogorov-Smirnov distance. The cut-off that makes
the two closest is broadcast back and each client keeps samples at or below it.

All distances are computed from integer counts, so candidate comparisons and
tie-breaks are exact.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import LabeledDataset
from .model import ModelSpec, losses_batch

BENCHMARK_ORIGIN = 0xFFFFFFFF


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LossSet:
    values: np.ndarray
    origin: int = BENCHMARK_ORIGIN  # client id, or BENCHMARK_ORIGIN

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)) or (v.size and v.min() < 0):
            raise ValueError("loss values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def is_benchmark(self) -> bool:
        return self.origin == BENCHMARK_ORIGIN

    def to_bytes(self) -> bytes:
        """``<u32 origin><u64 count><f64 * count>``, little-endian."""
        return struct.pack("<IQ", self.origin, len(self.values)) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LossSet":
        if len(blob) < 12:
            raise ValueError("loss record shorter than its 12-byte header")
        origin, count = struct.unpack_from("<IQ", blob, 0)
        if len(blob) != 12 + 8 * count:
            raise ValueError(f"loss record declares {count} values but has {len(blob) - 12} payload bytes")
        return cls(np.frombuffer(blob, "<f8", count, 12).copy(), origin)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["origin", "index", "loss"])
        origin = "benchmark" if self.is_benchmark else str(self.origin)
        for i, v in enumerate(self.values):
            w.writerow([origin, i, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        origin = BENCHMARK_ORIGIN
        if rows and rows[0]["origin"] != "benchmark":
            origin = int(rows[0]["origin"])
        rows.sort(key=lambda r: int(r["index"]))
        return cls(np.array([float(r["loss"]) for r in rows]), origin)


def merge_losses(sets: list[LossSet]) -> LossSet:
    """Union of client loss sets, sorted so the result ignores arrival order."""
    if not sets:
        return LossSet(np.empty(0), 0)
    return LossSet(np.sort(np.concatenate([s.values for s in sets])), 0)


def score_losses(spec: ModelSpec, theta_b: np.ndarray, dataset: LabeledDataset, origin: int = BENCHMARK_ORIGIN) -> LossSet:
    if len(dataset) == 0:
        return LossSet(np.empty(0), origin)
    return LossSet(losses_batch(spec, theta_b, dataset.x, dataset.y), origin)


class Ecdf:
    """Right-continuous empirical CDF of a finite sample."""

    def __init__(self, values):
        v = values.values if isinstance(values, LossSet) else values
        v = np.sort(np.asarray(v, dtype=np.float64).reshape(-1))
        if v.size == 0:
            raise ValueError("ECDF of an empty sample")
        v.setflags(write=False)
        self.sorted_values = v

    def __len__(self) -> int:
        return len(self.sorted_values)

    def count_le(self, x) -> np.ndarray:
        return np.searchsorted(self.sorted_values, x, side="right")

    def count_lt(self, x) -> np.ndarray:
        return np.searchsorted(self.sorted_values, x, side="left")

    def __call__(self, x):
        return self.count_le(x) / len(self)


def ecdf_build(values) -> Ecdf:
    return Ecdf(values)


def ecdf_eval(e: Ecdf, x: float) -> float:
    return float(e(x))


def truncated_eval(e: Ecdf, lam: float, x: float) -> float:
    mass = int(e.count_le(lam))
    if mass == 0:
        raise DomainError(f"no sample mass at or below lambda={lam}")
    if x >= lam:
        return 1.0
    return float(Fraction(int(e.count_le(x)), len(e)) / Fraction(mass, len(e)))


def _sup_numerators(fv: Ecdf, fp: Ecdf, lams: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each candidate cut-off, the KS distance as ``num / den`` (integers).

    Both CDFs are step functions, so the supremum is reached at a jump point,
    either at the point itself or just to its left.
    """
    pts = np.unique(np.concatenate([fv.sorted_values, fp.sorted_values, lams]))
    nv = len(fv)
    v_le = fv.count_le(pts).astype(np.int64)
    v_lt = fv.count_lt(pts).astype(np.int64)
    p_le = fp.count_le(pts).astype(np.int64)
    p_lt = fp.count_lt(pts).astype(np.int64)
    mass = fp.count_le(lams).astype(np.int64)[:, None]  # |{p <= lam}|

    at = pts[None, :] >= lams[:, None]
    right = pts[None, :] > lams[:, None]
    # |F_V - F_P^lam| scaled by nv * mass
    t_val = np.where(at, mass, p_le[None, :])
    t_left = np.where(right, mass, p_lt[None, :])
    d_val = np.abs(v_le[None, :] * mass - t_val * nv)
    d_left = np.abs(v_lt[None, :] * mass - t_left * nv)
    num = np.maximum(d_val.max(axis=1), d_left.max(axis=1))
    return num, nv * mass[:, 0]


def ks_distance(fv: Ecdf, fp: Ecdf, lam: float) -> float:
    if fp.count_le(lam) == 0:
        raise DomainError(f"no sample mass at or below lambda={lam}")
    num, den = _sup_numerators(fv, fp, np.array([lam], dtype=np.float64))
    return float(Fraction(int(num[0]), int(den[0])))


@dataclass(frozen=True)
class ThresholdResult:
    lambda_star: float
    g_min: float
    candidates_evaluated: int


def find_threshold(V: LossSet | np.ndarray, P: LossSet | np.ndarray, chunk: int = 256) -> ThresholdResult:
    """Cut-off over the distinct values of ``P`` minimising the KS distance.

    Ties go to the largest cut-off, which keeps the most data.
    """
    fv, fp = Ecdf(V if not isinstance(V, LossSet) else V.values), Ecdf(P if not isinstance(P, LossSet) else P.values)
    cands = np.unique(fp.sorted_values)
    best: Fraction | None = None
    best_lam = None
    for start in range(0, len(cands), chunk):
        lams = cands[start : start + chunk]
        num, den = _sup_numerators(fv, fp, lams)
        for lam, a, b in zip(lams, num.tolist(), den.tolist()):
            g = Fraction(a, b)
            if best is None or g <= best:
                best, best_lam = g, float(lam)
    return ThresholdResult(best_lam, float(best), len(cands))


def filter_client(dataset: LabeledDataset, losses: LossSet, lambda_star: float) -> LabeledDataset:
    if len(losses) != len(dataset):
        raise ValueError(f"{len(losses)} losses for {len(dataset)} samples")
    return dataset.subset(np.flatnonzero(losses.values <= lambda_star))


def kept_indices(losses: LossSet, lambda_star: float) -> np.ndarray:
    return np.flatnonzero(losses.values <= lambda_star)


@dataclass(frozen=True)
class SelectionQuality:
    precision: float
    recall: float
    nothing_kept: bool = False


def selection_metrics(selected: list, clean_truth: list) -> SelectionQuality:
    """Pooled precision/recall of kept index sets against clean index sets."""
    if len(selected) != len(clean_truth):
        raise ValueError("one kept set and one clean set per client")
    kept = hit = clean = 0
    for s, c in zip(selected, clean_truth):
        s, c = set(np.asarray(list(s)).tolist()), set(np.asarray(list(c)).tolist())
        kept += len(s)
        clean += len(c)
        hit += len(s & c)
    precision = hit / kept if kept else 1.0
    recall = hit / clean if clean else 1.0
    return SelectionQuality(precision, recall, kept == 0)
