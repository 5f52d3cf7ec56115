import math

import numpy as np
import pytest

from fedslr.model import Batch, ModelSpec, evaluate, gradient, gradient_at_sum, init_params, logits, loss
from fedslr.reshape import ParamSet
from support import central_fd, rel_err

SPECS = [ModelSpec((5,), 3), ModelSpec((5, 8), 3, "relu"), ModelSpec((4, 6, 5), 4, "tanh")]


def batch_for(spec, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, spec.layer_sizes[0])), rng.integers(0, spec.num_classes, size=n))


def params_for(spec, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return ParamSet.from_flat(spec.kinds, scale * rng.normal(size=sum(k.size for k in spec.kinds)))


def oracle_loss(spec, w, batch):
    """Per-sample loops with explicit sums; no shared code with the library."""
    mats = []
    for j in range(0, len(w.kinds), 2):
        k = w.kinds[j]
        mats.append((w.values[j].reshape(k.out_features, k.in_features), w.values[j + 1]))
    total = 0.0
    for x, y in zip(batch.features, batch.labels):
        h = list(x)
        for li, (W, b) in enumerate(mats):
            z = [sum(W[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(W.shape[0])]
            if li < len(mats) - 1:
                h = [max(v, 0.0) if spec.activation == "relu" else math.tanh(v) for v in z]
            else:
                h = z
        mx = max(h)
        lse = mx + math.log(sum(math.exp(v - mx) for v in h))
        total += lse - h[y]
    return total / len(batch)


def test_zero_logits_give_log_classes():
    spec = ModelSpec((3,), 4)
    w = ParamSet.zeros(spec.kinds)
    assert loss(spec, w, batch_for(spec, 6, 0)) == pytest.approx(math.log(4), abs=1e-14)


def test_large_margin_loss_vanishes():
    spec = ModelSpec((2,), 2)
    W = np.array([[50.0, 0.0], [-50.0, 0.0]])
    w = ParamSet(spec.kinds, [W.reshape(-1), np.zeros(2)])
    b = Batch(np.array([[1.0, 0.0], [-1.0, 0.3]]), np.array([0, 1]))
    assert loss(spec, w, b) < 1e-12
    assert gradient(spec, w, b).norm() < 1e-6
    assert evaluate(spec, w, None, b) == 1.0


def test_loss_matches_forward_oracle():
    spec = ModelSpec((4, 5), 3)
    w = init_params(spec, np.random.default_rng(1))
    b = batch_for(spec, 8, 2)
    assert abs(loss(spec, w, b) - oracle_loss(spec, w, b)) <= 1e-12


@pytest.mark.parametrize("spec", SPECS, ids=["linear", "mlp-relu", "mlp-tanh"])
def test_gradient_finite_differences(spec):
    b = batch_for(spec, 7, 3)
    for seed in range(5):
        w = params_for(spec, 10 + seed, 0.5)
        fd = central_fd(lambda x: loss(spec, ParamSet.from_flat(spec.kinds, x), b), w.flat())
        assert rel_err(gradient(spec, w, b).flat(), fd) <= 1e-5


def test_linear_single_sample_closed_form():
    spec = ModelSpec((3,), 3)
    w = params_for(spec, 4)
    x, y = np.array([0.5, -1.0, 2.0]), 1
    W = w.values[0].reshape(3, 3)
    z = W @ x + w.values[1]
    p = np.exp(z - z.max())
    p /= p.sum()
    r = p - np.eye(3)[y]
    g = gradient(spec, w, Batch(x[None, :], np.array([y])))
    np.testing.assert_allclose(g.values[0], np.outer(r, x).reshape(-1), atol=1e-14)
    np.testing.assert_allclose(g.values[1], r, atol=1e-14)


def test_gradient_at_sum():
    spec = ModelSpec((4, 5), 3)
    w, p, b = params_for(spec, 1), params_for(spec, 2), batch_for(spec, 5, 3)
    zero = ParamSet.zeros(spec.kinds)
    assert gradient_at_sum(spec, w, zero, b).equal(gradient(spec, w, b))
    np.testing.assert_allclose(gradient_at_sum(spec, zero, p, b).flat(), gradient(spec, p, b).flat())
    np.testing.assert_allclose(gradient_at_sum(spec, w, p, b).flat(),
                               gradient(spec, ParamSet.from_flat(spec.kinds, w.flat() + p.flat()), b).flat())


def test_descent_direction():
    spec = ModelSpec((4, 6), 3)
    w, b = params_for(spec, 5, 0.5), batch_for(spec, 10, 6)
    g = gradient(spec, w, b)
    assert loss(spec, w, b) - loss(spec, w - 1e-4 * g, b) > 0


def test_evaluate_tie_rule():
    spec = ModelSpec((2,), 2)
    b = Batch(np.random.default_rng(0).normal(size=(10, 2)), np.array([0, 1] * 5))
    assert evaluate(spec, ParamSet.zeros(spec.kinds), None, b) == 0.5


def test_evaluate_matches_per_sample_argmax_and_shift_invariance():
    spec = ModelSpec((4, 5), 3)
    w, b = params_for(spec, 7), batch_for(spec, 30, 8)
    z = logits(spec, w, b.features)
    oracle = np.mean([int(np.argmax(row)) == y for row, y in zip(z, b.labels)])
    assert evaluate(spec, w, None, b) == oracle
    shifted = w.copy()
    shifted.values[-1] = shifted.values[-1] + 3.0
    assert evaluate(spec, shifted, None, b) == oracle


def test_evaluate_with_personal_component():
    spec = ModelSpec((4,), 3)
    w, p, b = params_for(spec, 1), params_for(spec, 2), batch_for(spec, 12, 3)
    assert evaluate(spec, w, p, b) == evaluate(spec, w + p, None, b)


def test_shape_and_empty_errors():
    spec = ModelSpec((4,), 3)
    with pytest.raises(ValueError):
        loss(spec, ParamSet.zeros(ModelSpec((5,), 3).kinds), batch_for(spec, 3, 0))
    with pytest.raises(ValueError):
        evaluate(spec, ParamSet.zeros(spec.kinds), None, Batch(np.zeros((0, 4)), np.zeros(0)))
    with pytest.raises(ValueError):
        ModelSpec((4,), 1)


def test_init_is_seeded_and_bounded():
    spec = ModelSpec((10, 20), 5)
    a = init_params(spec, np.random.default_rng(3))
    b = init_params(spec, np.random.default_rng(3))
    assert a.equal(b)
    assert np.all(np.abs(a.values[0]) <= np.sqrt(6 / 30)) and np.all(a.values[1] == 0)
