"""Multilayer perceptron classifier with softmax cross-entropy, trained by plain SGD.

Parameters live in one flat float64 vector. Layer ``k`` occupies a
``(fan_out, fan_in)`` row-major weight block followed by its ``fan_out``
biases. Hidden layers use a rectifier; the head is a softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .numkit import RngStream, ShapeError, softmax

if TYPE_CHECKING:
    from .data import LabeledDataset

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_slices(self) -> list[tuple[slice, slice, int, int]]:
        """(weight slice, bias slice, fan_in, fan_out) per layer."""
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w, b, fan_in, fan_out))
        return out


@dataclass(frozen=True)
class Hyper:
    eta: float = 0.01
    epochs: int = 1
    batch_fraction: float = 0.08

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")


def _layers(spec: ModelSpec, theta: np.ndarray):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise ShapeError(f"parameter vector has shape {theta.shape}, spec needs ({spec.num_params},)")
    return [
        (theta[w].reshape(fan_out, fan_in), theta[b])
        for w, b, fan_in, fan_out in spec.layer_slices()
    ]


def init_params(spec: ModelSpec, stream: RngStream) -> np.ndarray:
    theta = np.zeros(spec.num_params)
    for w, _, fan_in, fan_out in spec.layer_slices():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        theta[w] = stream.uniform(fan_in * fan_out, -limit, limit)
    return theta


def forward_batch(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs of shape {X.shape} do not match input dim {spec.input_dim}")
    layers = _layers(spec, theta)
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W.T + b, 0.0)
    W, b = layers[-1]
    return softmax(h @ W.T + b)


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ShapeError(f"input of shape {x.shape} does not match input dim {spec.input_dim}")
    return forward_batch(spec, theta, x[None, :])[0]


def _check_labels(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return y


def losses_batch(spec: ModelSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy, probability clamped at ``PROB_FLOOR``."""
    y = _check_labels(spec, y)
    probs = forward_batch(spec, theta, X)
    p = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(p, PROB_FLOOR))


def loss(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(losses_batch(spec, theta, x[None, :], np.array([y]))[0])


def grad_minibatch(spec: ModelSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean batch loss with respect to the flat parameters."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(spec, y)
    if len(y) == 0:
        raise ValueError("gradient of an empty batch")
    if X.ndim != 2 or X.shape != (len(y), spec.input_dim):
        raise ShapeError(f"batch of shape {X.shape} does not match labels/input dim")
    layers = _layers(spec, theta)
    acts = [X]
    for W, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ W.T + b, 0.0))
    W, b = layers[-1]
    probs = softmax(acts[-1] @ W.T + b)
    n = len(y)
    # the clamp is flat below PROB_FLOOR, so those rows contribute nothing
    clamped = probs[np.arange(n), y] < PROB_FLOOR
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta[clamped] = 0.0
    delta /= n

    grad = np.empty(spec.num_params)
    slices = spec.layer_slices()
    for k in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, _, _ = slices[k]
        grad[w_sl] = (delta.T @ acts[k]).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ layers[k][0]) * (acts[k] > 0)
    return grad


def sgd_step(theta: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if theta.shape != g.shape:
        raise ShapeError(f"parameter shape {theta.shape} != gradient shape {g.shape}")
    return theta - eta * g


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    mean_loss: float


def evaluate(spec: ModelSpec, theta: np.ndarray, testset: "LabeledDataset") -> Evaluation:
    if len(testset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    y = _check_labels(spec, testset.y)
    probs = forward_batch(spec, theta, testset.x)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    losses = -np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))
    return Evaluation(acc, float(np.sum(losses) / len(losses)))


def minibatch_size(n_selected: int, fraction: float) -> int:
    """Batch size as a fixed share of the local data, rounded half-up, at least 1."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if n_selected <= 0:
        return 0
    return max(1, math.floor(fraction * n_selected + 0.5))


def train_centralized(
    spec: ModelSpec,
    dataset: "LabeledDataset",
    hyper: Hyper,
    stream: RngStream,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Mini-batch SGD from ``init_params(spec, stream)``.

    Each epoch walks a fresh permutation in consecutive chunks; the last chunk
    may be short. ``callback(epoch, theta)`` fires after every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    theta = init_params(spec, stream)
    n = len(dataset)
    bs = minibatch_size(n, hyper.batch_fraction)
    for epoch in range(hyper.epochs):
        order = stream.shuffle(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g = grad_minibatch(spec, theta, dataset.x[idx], dataset.y[idx])
            theta = sgd_step(theta, g, hyper.eta)
        if callback is not None:
            callback(epoch, theta)
    return theta
