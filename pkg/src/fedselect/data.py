"""Datasets: IDX ingestion, synthetic blobs, benchmark sampling, non-iid
partitioning and noise injection (open-set and closed-set)."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import RngStream

log = logging.getLogger(__name__)

# provenance codes
TARGET = 0
NOISE = 1
MISLABELED = 2
PROVENANCE_NAMES = {TARGET: "target", NOISE: "noise", MISLABELED: "mislabeled"}

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
_IDX_NDIM = {IDX_LABELS_MAGIC: 1, IDX_IMAGES_MAGIC: 3}
_IDX_MAX_ITEMS = 1 << 40

CACHE_MAGIC = b"FDS1"


class IdxParseError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"IDX parse error at byte offset {offset}: {message}")
        self.offset = offset


class ConfigurationError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Features ``x`` (n, d) flattened from ``feature_shape``, labels ``y``.

    ``uid`` gives each sample an identity that survives subsetting, so that
    disjointness and subset relations can be checked after any transform.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    feature_shape: tuple[int, ...]
    provenance: np.ndarray = None
    uid: np.ndarray = None
    noise_source: str | None = None

    def __post_init__(self):
        d = math.prod(self.feature_shape)
        x = np.asarray(self.x, dtype=np.float64).reshape(-1, d)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        n = len(y)
        if len(x) != n:
            raise ValueError(f"{len(x)} feature rows but {n} labels")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        prov = np.zeros(n, np.uint8) if self.provenance is None else np.asarray(self.provenance, np.uint8)
        uid = np.arange(n, dtype=np.int64) if self.uid is None else np.asarray(self.uid, np.int64)
        if prov.shape != (n,) or uid.shape != (n,):
            raise ValueError("provenance and uid must have one entry per sample")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "provenance", _frozen(prov))
        object.__setattr__(self, "uid", _frozen(uid))
        object.__setattr__(self, "feature_shape", tuple(int(s) for s in self.feature_shape))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.x[idx], self.y[idx], self.num_classes, self.feature_shape,
            self.provenance[idx], self.uid[idx], self.noise_source,
        )

    def clean_mask(self) -> np.ndarray:
        return self.provenance == TARGET

    def with_labels(self, y: np.ndarray, provenance: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            self.x, y, self.num_classes, self.feature_shape, provenance, self.uid, self.noise_source
        )

    @staticmethod
    def concat(parts: list["LabeledDataset"], num_classes: int, feature_shape) -> "LabeledDataset":
        d = math.prod(feature_shape)
        if not parts:
            return LabeledDataset(np.empty((0, d)), np.empty(0, np.int64), num_classes, feature_shape)
        sources = {p.noise_source for p in parts if p.noise_source}
        return LabeledDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            num_classes,
            feature_shape,
            np.concatenate([p.provenance for p in parts]),
            np.concatenate([p.uid for p in parts]),
            "+".join(sorted(sources)) or None,
        )


def empty_like(ds: LabeledDataset) -> LabeledDataset:
    return ds.subset(np.empty(0, np.int64))


# ---------------------------------------------------------------- IDX format


def parse_idx(data: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Parse an unsigned-byte IDX blob (labels 0x801 or images 0x803)."""
    if len(data) < 4:
        raise IdxParseError(len(data), "file shorter than the 4-byte magic")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in _IDX_NDIM:
        raise IdxParseError(0, f"bad magic 0x{magic:08x}")
    ndim = _IDX_NDIM[magic]
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError(len(data), f"header truncated, need {header_end} bytes")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    total = 1
    for k, d in enumerate(dims):
        total *= d
        if total > _IDX_MAX_ITEMS:
            raise IdxParseError(4 + 4 * k, f"dimension product exceeds {_IDX_MAX_ITEMS}")
    end = header_end + total
    if len(data) < end:
        raise IdxParseError(len(data), f"payload truncated, expected {total} bytes from offset {header_end}")
    if len(data) > end:
        raise IdxParseError(end, f"{len(data) - end} trailing bytes after payload")
    tensor = np.frombuffer(data, dtype=np.uint8, count=total, offset=header_end).reshape(dims)
    return tuple(dims), tensor


def encode_idx(tensor: np.ndarray) -> bytes:
    tensor = np.asarray(tensor)
    if tensor.dtype != np.uint8:
        raise ValueError("only unsigned-byte tensors can be encoded")
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(tensor.ndim)
    if magic is None:
        raise ValueError(f"only 1-D and 3-D tensors are supported, got {tensor.ndim}-D")
    header = struct.pack(f">I{tensor.ndim}I", magic, *tensor.shape)
    return header + np.ascontiguousarray(tensor).tobytes()


def load_idx_pair(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> LabeledDataset:
    """Images scaled to [0, 1] by /255; feature shape (H, W, 1)."""
    idims, images = parse_idx(Path(images_path).read_bytes())
    ldims, labels = parse_idx(Path(labels_path).read_bytes())
    if len(idims) != 3 or len(ldims) != 1:
        raise ValueError("expected a 3-D image file and a 1-D label file")
    if idims[0] != ldims[0]:
        raise ValueError(f"{idims[0]} images but {ldims[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    shape = (idims[1], idims[2], 1)
    return LabeledDataset(images.reshape(len(labels), -1) / 255.0, labels, num_classes, shape)


# ---------------------------------------------------------------- cache


def save_dataset(ds: LabeledDataset) -> bytes:
    """Serialize to the FDS1 cache layout (little-endian)."""
    shape = ds.feature_shape
    header = CACHE_MAGIC + struct.pack(f"<QII{len(shape)}I", len(ds), ds.num_classes, len(shape), *shape)
    return (
        header
        + ds.x.astype("<f8").tobytes()
        + ds.y.astype("<u2").tobytes()
        + ds.provenance.astype("u1").tobytes()
    )


def load_dataset(blob: bytes) -> LabeledDataset:
    if blob[:4] != CACHE_MAGIC:
        raise ValueError("not an FDS1 dataset cache")
    n, num_classes, ndim = struct.unpack_from("<QII", blob, 4)
    off = 4 + 16
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    d = math.prod(shape)
    x = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d)
    off += 8 * n * d
    y = np.frombuffer(blob, "<u2", n, off)
    off += 2 * n
    prov = np.frombuffer(blob, "u1", n, off)
    if off + n != len(blob):
        raise ValueError("FDS1 cache length does not match its header")
    return LabeledDataset(x, y.astype(np.int64), num_classes, shape, prov.copy())


# ---------------------------------------------------------------- synthetic data


def class_centers(classes: int, dims: int, centers_scale: float, layout_seed: int = 0) -> np.ndarray:
    """One pseudo-random direction of norm ``centers_scale`` per class."""
    centers = np.empty((classes, dims))
    for c in range(classes):
        v = RngStream(layout_seed, f"synth-center-{c}-d{dims}").gaussian(dims)
        centers[c] = centers_scale * v / np.linalg.norm(v)
    return centers


def noise_offset(dims: int, noise_shift: float, layout_seed: int = 0) -> np.ndarray:
    if noise_shift == 0:
        return np.zeros(dims)
    v = RngStream(layout_seed, f"synth-noise-offset-d{dims}").gaussian(dims)
    return noise_shift * v / np.linalg.norm(v)


def synth_gaussian(
    classes: int,
    dims: int,
    per_class: int,
    centers_scale: float,
    noise_shift: float,
    stream: RngStream,
    layout_seed: int = 0,
) -> LabeledDataset:
    """Isotropic unit-variance blobs, ``per_class`` samples per label.

    Centers depend only on ``(layout_seed, class, dims)``; a non-zero
    ``noise_shift`` moves every center by the same offset vector.
    """
    if classes < 1 or dims < 1 or per_class < 1:
        raise ValueError("classes, dims and per_class must be positive")
    centers = class_centers(classes, dims, centers_scale, layout_seed)
    centers = centers + noise_offset(dims, noise_shift, layout_seed)
    y = np.repeat(np.arange(classes), per_class)
    x = centers[y] + stream.gaussian(len(y) * dims).reshape(len(y), dims)
    return LabeledDataset(x, y, classes, (dims,))


# ---------------------------------------------------------------- benchmark split


@dataclass(frozen=True)
class BenchmarkSplit:
    train: LabeledDataset
    test: LabeledDataset


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def split_benchmark(
    clean: LabeledDataset, fraction: float, train_share: float, stream: RngStream
) -> tuple[BenchmarkSplit, LabeledDataset]:
    """Stratified sample of ``fraction`` of ``clean`` split into train/test.

    Each class contributes ``round(fraction * class_count)`` samples (at least
    one); within a class, ``round(train_share * k)`` go to training, clamped so
    that both halves end up nonempty overall.
    """
    if not 0 < fraction < 1 or not 0 < train_share < 1:
        raise ValueError("fraction and train_share must lie in (0, 1)")
    labels = np.unique(clean.y)
    picked: list[np.ndarray] = []
    for c in labels:
        members = np.flatnonzero(clean.y == c)
        k = max(1, _round_half_up(fraction * len(members)))
        perm = stream.shuffle(len(members))
        picked.append(members[perm[:k]])
    total = sum(len(p) for p in picked)
    if total < 2:
        raise ConfigurationError(
            f"benchmark fraction {fraction} yields {total} sample(s); need one per class and a nonempty test split"
        )
    train_idx, test_idx = [], []
    for p in picked:
        k_train = _round_half_up(train_share * len(p))
        train_idx.append(p[:k_train])
        test_idx.append(p[k_train:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    # guarantee both splits are nonempty
    if len(test_idx) == 0:
        test_idx, train_idx = train_idx[-1:], train_idx[:-1]
    elif len(train_idx) == 0:
        train_idx, test_idx = test_idx[-1:], test_idx[:-1]
    chosen = np.zeros(len(clean), bool)
    chosen[train_idx] = True
    chosen[test_idx] = True
    split = BenchmarkSplit(clean.subset(np.sort(train_idx)), clean.subset(np.sort(test_idx)))
    return split, clean.subset(np.flatnonzero(~chosen))


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray  # sample index -> client id
    num_clients: int
    client_labels: tuple[int, ...] = field(default=())

    def client_indices(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == n)

    def apply(self, dataset: LabeledDataset) -> list[LabeledDataset]:
        return [dataset.subset(self.client_indices(n)) for n in range(self.num_clients)]


def partition_noniid(dataset: LabeledDataset, num_clients: int, stream: RngStream) -> PartitionPlan:
    """One label per client; per-label client counts differ by at most one."""
    C = dataset.num_classes
    if num_clients < C:
        raise ConfigurationError(f"{num_clients} clients cannot cover {C} labels")
    counts = np.full(C, num_clients // C)
    counts[stream.shuffle(C)[: num_clients % C]] += 1
    labels = np.repeat(np.arange(C), counts)
    client_labels = labels[stream.shuffle(num_clients)]

    assignment = np.full(len(dataset), -1, dtype=np.int64)
    for c in range(C):
        clients = np.flatnonzero(client_labels == c)
        members = np.flatnonzero(dataset.y == c)
        members = members[stream.shuffle(len(members))]
        for chunk, client in zip(np.array_split(members, len(clients)), clients):
            assignment[chunk] = client
    return PartitionPlan(assignment, num_clients, tuple(int(c) for c in client_labels))


# ---------------------------------------------------------------- noise


def transform_dims(x: np.ndarray, from_shape: tuple[int, ...], to_shape: tuple[int, ...]) -> np.ndarray:
    """Map (H, W, C) features onto another (H, W, C) grid and flatten.

    Spatial resize is nearest-neighbour (source index ``floor(i * H / H')``);
    a single channel is replicated, several channels are averaged down to one.
    A leading batch axis is allowed.
    """
    from_shape, to_shape = tuple(from_shape), tuple(to_shape)
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2 or x.ndim == len(from_shape) + 1
    n = x.shape[0] if batched else 1
    if from_shape == to_shape:
        return x.reshape(n, -1) if batched else x.reshape(-1)
    if len(from_shape) != 3 or len(to_shape) != 3:
        raise ValueError(f"cannot transform {from_shape} -> {to_shape}; both must be (H, W, C)")
    if 0 in from_shape or 0 in to_shape:
        raise ValueError("zero-sized dimension")
    (h, w, c), (h2, w2, c2) = from_shape, to_shape
    img = x.reshape(n, h, w, c)
    rows = (np.arange(h2) * h) // h2
    cols = (np.arange(w2) * w) // w2
    img = img[:, rows][:, :, cols]
    if c2 != c:
        if c == 1:
            img = np.repeat(img, c2, axis=3)
        elif c2 == 1:
            img = img.mean(axis=3, keepdims=True)
        else:
            raise ValueError(f"cannot map {c} channels onto {c2}")
    return img.reshape(n, -1) if batched else img.reshape(-1)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    if weights.sum() <= 0 or total <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    raw = weights * (total / weights.sum())
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def mix_openset(
    target_clients: list[LabeledDataset],
    noise_source: LabeledDataset,
    ratio: float,
    stream: RngStream,
    source_name: str = "noise",
) -> list[LabeledDataset]:
    """Append same-label samples from ``noise_source`` to each client.

    Client ``n`` gets a jitter ``r_n ~ U[0.5, 1.5]``; noise counts are
    proportional to ``r_n * |target_n|`` and scaled so that the total is
    ``round(ratio * total_target)`` (largest-remainder rounding). Clients whose
    labels the noise source lacks receive nothing.
    """
    if ratio <= 0:
        raise ValueError("noise ratio must be positive")
    if not target_clients:
        return []
    shape = target_clients[0].feature_shape
    num_classes = target_clients[0].num_classes
    noise_x = transform_dims(noise_source.x, noise_source.feature_shape, shape).reshape(len(noise_source), -1)

    jitter = stream.uniform(len(target_clients), 0.5, 1.5)
    sizes = np.array([len(c) for c in target_clients], dtype=np.float64)
    eligible = np.array(
        [len(c) > 0 and bool(np.all(np.isin(np.unique(c.y), noise_source.y))) for c in target_clients]
    )
    for n in np.flatnonzero(~eligible & (sizes > 0)):
        log.warning("client %d: noise source has none of its labels, no noise added", n)
    total = _round_half_up(ratio * sizes[eligible].sum())
    counts = _largest_remainder(np.where(eligible, jitter * sizes, 0.0), total)

    pools = {c: np.flatnonzero(noise_source.y == c) for c in np.unique(noise_source.y)}
    pools = {c: p[stream.shuffle(len(p))] for c, p in pools.items()}
    cursor = {c: 0 for c in pools}
    next_uid = 1 + max((int(c.uid.max()) for c in target_clients if len(c)), default=-1)

    out = []
    for client, k in zip(target_clients, counts):
        if k == 0:
            out.append(client)
            continue
        # spread the client's noise across its labels in proportion to their counts
        labs, lab_counts = np.unique(client.y, return_counts=True)
        per_label = _largest_remainder(lab_counts.astype(np.float64), int(k))
        picks = []
        for c, m in zip(labs, per_label):
            pool = pools[c]
            start = cursor[c]
            if start + m > len(pool):
                log.warning("noise pool for label %d exhausted; reusing samples", c)
            take = pool[np.arange(start, start + m) % len(pool)]
            cursor[c] = start + m
            picks.append(take)
        picks = np.concatenate(picks)
        noise = LabeledDataset(
            noise_x[picks], noise_source.y[picks], num_classes, shape,
            np.full(len(picks), NOISE, np.uint8),
            np.arange(next_uid, next_uid + len(picks)),
            source_name,
        )
        next_uid += len(picks)
        out.append(LabeledDataset.concat([client, noise], num_classes, shape))
    return out


def corrupt_closedset(
    clients: list[LabeledDataset],
    offset: int,
    label_range: tuple[int, int],
    client_fraction: float,
    stream: RngStream,
) -> list[LabeledDataset]:
    """Shift labels in ``[lo, hi]`` by ``offset`` (wrapping inside the range)
    on ``round(client_fraction * N)`` randomly chosen clients."""
    lo, hi = label_range
    if not 0 <= client_fraction <= 1:
        raise ValueError("client_fraction must lie in [0, 1]")
    if lo > hi or lo < 0:
        raise ValueError(f"bad label range {label_range}")
    width = hi - lo + 1
    k = _round_half_up(client_fraction * len(clients))
    chosen = set(stream.shuffle(len(clients))[:k].tolist())
    out = []
    for n, client in enumerate(clients):
        if n not in chosen or offset % width == 0:
            out.append(client)
            continue
        hit = (client.y >= lo) & (client.y <= hi)
        y = client.y.copy()
        y[hit] = (y[hit] - lo + offset) % width + lo
        prov = client.provenance.copy()
        prov[hit] = MISLABELED
        out.append(client.with_labels(y, prov))
    return out
