import math

import numpy as np
import pytest

from conftest import blobs
from fedselect.data import LabeledDataset
from fedselect.model import (
    Hyper,
    ModelSpec,
    evaluate,
    forward,
    forward_batch,
    grad_minibatch,
    init_params,
    loss,
    losses_batch,
    minibatch_size,
    sgd_step,
    train_centralized,
)
from fedselect.numkit import RngStream, ShapeError, finite_diff_grad

SPEC = ModelSpec((4, 8, 3))


def random_instance(seed: int, batch: int = 6):
    r = RngStream(seed, "model-instance")
    theta = r.gaussian(SPEC.num_params)
    X = r.gaussian(batch * 4).reshape(batch, 4)
    y = r.integers(batch, 3)
    return theta, X, y


def test_param_count():
    assert SPEC.num_params == 4 * 8 + 8 + 8 * 3 + 3
    with pytest.raises(ValueError):
        ModelSpec((4,))


def test_init_biases_zero_and_deterministic():
    a = init_params(SPEC, RngStream(1, "init"))
    b = init_params(SPEC, RngStream(1, "init"))
    np.testing.assert_array_equal(a, b)
    for w, bias, fan_in, fan_out in SPEC.layer_slices():
        assert np.all(a[bias] == 0.0)
        assert np.abs(a[w]).max() <= math.sqrt(6 / (fan_in + fan_out))


def test_init_weight_mean_near_zero():
    spec = ModelSpec((100, 100, 3))
    theta = init_params(spec, RngStream(2, "init"))
    w = theta[spec.layer_slices()[0][0]]
    assert len(w) == 10_000
    sigma = math.sqrt(6 / 200) / math.sqrt(3)
    assert abs(w.mean()) <= 3 * sigma / 100


def test_forward_zero_params_uniform():
    p = forward(SPEC, np.zeros(SPEC.num_params), np.ones(4))
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


def test_forward_closed_form_two_class_linear():
    spec = ModelSpec((1, 2))
    theta = np.array([1.0, -1.0, 0.0, 0.0])
    p = forward(spec, theta, np.array([2.0]))
    expected = np.array([math.exp(2), math.exp(-2)]) / (math.exp(2) + math.exp(-2))
    np.testing.assert_allclose(p, expected, atol=1e-15)
    assert p[0] == pytest.approx(0.98201379, abs=1e-8)
    assert p[1] == pytest.approx(0.01798621, abs=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_forward_is_distribution(seed):
    theta, X, _ = random_instance(seed)
    P = forward_batch(SPEC, theta, X)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(SPEC, np.zeros(SPEC.num_params), np.ones(3))
    with pytest.raises(ShapeError):
        forward(SPEC, np.zeros(5), np.ones(4))


def test_loss_closed_forms():
    spec = ModelSpec((1, 10))
    assert loss(spec, np.zeros(spec.num_params), np.array([0.3]), 4) == pytest.approx(math.log(10), abs=1e-12)
    # probability 0.25 on the true class: logits ln1, ln3 -> [0.25, 0.75]
    two = ModelSpec((1, 2))
    theta = np.array([0.0, 0.0, 0.0, math.log(3)])
    assert loss(two, theta, np.array([1.0]), 0) == pytest.approx(math.log(4), abs=1e-12)
    # near-certain prediction on the true class
    certain = np.array([0.0, 0.0, 800.0, 0.0])
    assert loss(two, certain, np.array([1.0]), 0) == 0.0


def test_loss_clamped_and_nonnegative():
    two = ModelSpec((1, 2))
    theta = np.array([0.0, 0.0, -800.0, 0.0])
    assert loss(two, theta, np.array([1.0]), 0) == pytest.approx(-math.log(1e-12))
    for seed in range(5):
        theta, X, y = random_instance(seed)
        assert np.all(losses_batch(SPEC, theta, X, y) >= 0)


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    theta, X, y = random_instance(seed)
    g = grad_minibatch(SPEC, theta, X, y)
    fd = finite_diff_grad(lambda t: float(np.mean(losses_batch(SPEC, t, X, y))), theta, 1e-5)
    assert _rel_err(g, fd) < 1e-4


def test_gradient_duplicated_batch():
    theta, X, y = random_instance(3)
    g1 = grad_minibatch(SPEC, theta, X, y)
    g2 = grad_minibatch(SPEC, theta, np.vstack([X, X]), np.concatenate([y, y]))
    np.testing.assert_allclose(g1, g2, atol=1e-14)


def test_gradient_symmetric_output_bias():
    theta = np.zeros(SPEC.num_params)
    X = RngStream(4, "sym").gaussian(12).reshape(3, 4)
    g = grad_minibatch(SPEC, theta, X, np.array([0, 1, 2]))
    out_bias = SPEC.layer_slices()[-1][1]
    np.testing.assert_allclose(g[out_bias], 0.0, atol=1e-15)


def test_gradient_empty_batch():
    with pytest.raises(ValueError):
        grad_minibatch(SPEC, np.zeros(SPEC.num_params), np.empty((0, 4)), np.empty(0, int))


def test_sgd_step():
    np.testing.assert_array_equal(sgd_step([1.0, 2.0], [0.0, 0.0], 0.5), [1.0, 2.0])
    np.testing.assert_allclose(sgd_step([1.0], [0.5], 0.01), [0.995], atol=1e-15)
    with pytest.raises(ShapeError):
        sgd_step([1.0], [1.0, 2.0], 0.1)


def test_two_steps_differ_from_one_summed_step():
    # f(t) = t^2: two steps give (1-2e)^2 t, one summed step gives (1-4e) t
    eta, t0 = 0.1, np.array([1.0])
    grad = lambda t: 2 * t  # noqa: E731
    t1 = sgd_step(t0, grad(t0), eta)
    two = sgd_step(t1, grad(t1), eta)
    one = sgd_step(t0, grad(t0) + grad(t0), eta)
    assert two[0] == pytest.approx(0.64) and one[0] == pytest.approx(0.6)
    assert abs(two[0] - one[0]) == pytest.approx(4 * eta**2 * t0[0])


def test_evaluate_perfect_and_tie_rule():
    spec = ModelSpec((1, 2))
    ds = LabeledDataset(np.array([[1.0], [2.0], [-1.0]]), np.array([0, 0, 1]), 2, (1,))
    perfect = np.array([1.0, -1.0, 0.0, 0.0]) * 50
    assert evaluate(spec, perfect, ds).accuracy == 1.0

    spec10 = ModelSpec((2, 10))
    y = np.repeat(np.arange(10), 7)
    balanced = LabeledDataset(np.zeros((70, 2)), y, 10, (2,))
    ev = evaluate(spec10, np.zeros(spec10.num_params), balanced)
    assert ev.accuracy == pytest.approx(0.1)
    assert ev.mean_loss == pytest.approx(math.log(10))


def test_evaluate_mean_loss_is_average():
    theta, X, y = random_instance(7, batch=9)
    ds = LabeledDataset(X, y, 3, (4,))
    per = [loss(SPEC, theta, X[i], int(y[i])) for i in range(9)]
    assert evaluate(SPEC, theta, ds).mean_loss == pytest.approx(sum(per) / 9, abs=1e-14)
    with pytest.raises(ValueError):
        evaluate(SPEC, theta, ds.subset([]))


def test_minibatch_size_rule():
    assert minibatch_size(100, 0.08) == 8
    assert minibatch_size(0, 0.08) == 0
    assert minibatch_size(3, 0.08) == 1
    assert minibatch_size(25, 0.1) == 3  # 2.5 rounds up
    assert minibatch_size(10, 1.0) == 10


def test_train_centralized_separable(two_blobs):
    spec = ModelSpec((2, 8, 2))
    theta = train_centralized(spec, two_blobs, Hyper(0.05, 30, 0.08), RngStream(0, "train"))
    assert evaluate(spec, theta, two_blobs).accuracy >= 0.95


def test_train_zero_epochs_returns_init(two_blobs):
    spec = ModelSpec((2, 8, 2))
    theta = train_centralized(spec, two_blobs, Hyper(0.01, 0, 0.08), RngStream(3, "train"))
    np.testing.assert_array_equal(theta, init_params(spec, RngStream(3, "train")))


def test_train_full_batch_descends():
    ds = blobs(1, centers=((-1.0, 0.0), (1.0, 0.5), (0.0, 1.5)), sigma=1.0)
    spec = ModelSpec((2, 8, 3))
    start = init_params(spec, RngStream(5, "train"))
    theta = train_centralized(spec, ds, Hyper(0.01, 20, 1.0), RngStream(5, "train"))
    assert evaluate(spec, theta, ds).mean_loss <= evaluate(spec, start, ds).mean_loss


def test_train_deterministic(two_blobs):
    spec = ModelSpec((2, 4, 2))
    a = train_centralized(spec, two_blobs, Hyper(0.01, 3, 0.1), RngStream(8, "t"))
    b = train_centralized(spec, two_blobs, Hyper(0.01, 3, 0.1), RngStream(8, "t"))
    assert a.tobytes() == b.tobytes()
