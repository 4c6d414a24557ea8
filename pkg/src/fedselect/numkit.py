"""Small dense kernels, keyed random streams and a finite-difference helper.

Everything here works in float64. Random streams are keyed by ``(seed, label)``
so that the values an actor sees do not depend on which other actors ran
before it (or concurrently with it).
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

_U53 = 2.0**-53


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def as_matrix(rows: list[list[float]] | np.ndarray) -> np.ndarray:
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b`` with explicit shape checking."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"affine expects (2-D, 1-D, 1-D), got {W.shape}, {x.shape}, {b.shape}")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"affine: W {W.shape} incompatible with x {x.shape} / b {b.shape}")
    return W @ x + b


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class RngStream:
    """Deterministic random stream keyed by ``(seed, label)``.

    The key is the SHA-256 digest of ``"<seed>/<label>"`` fed to a Philox
    counter-based generator; only its raw 64-bit words are used, and the
    transforms below are our own, so the sequence for a given key does not
    depend on numpy's higher-level sampling routines.

    * uniform: top 53 bits of each word, scaled to [0, 1)
    * gaussian: Box-Muller on pairs of uniforms (cosine branch only)
    * shuffle: stable argsort of ``n`` uniform keys
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(f"{self.seed}/{self.label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8").copy()
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"

    def child(self, suffix: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{suffix}")

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n)).astype(np.uint64)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def gaussian(self, n: int) -> np.ndarray:
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        # 1 - u1 lies in (0, 1], so the log is finite
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def shuffle(self, n: int) -> np.ndarray:
        """A uniformly random permutation of ``range(n)``."""
        return np.argsort(self.uniform(n), kind="stable").astype(np.int64)


def rng_draw(stream: RngStream, kind: str, n: int) -> np.ndarray:
    if kind == "uniform":
        return stream.uniform(n)
    if kind == "gaussian":
        return stream.gaussian(n)
    if kind == "shuffle":
        return stream.shuffle(n)
    raise ValueError(f"unknown draw kind {kind!r}")


def finite_diff_grad(
    f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64, ndmin=1)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        hi = f(theta)
        theta[i] = orig - eps
        lo = f(theta)
        theta[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad
