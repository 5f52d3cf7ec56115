import numpy as np
import pytest

from fedslr.core import HyperParams, local_fusion
from fedslr.diagnostics import (CommLedger, RoundMetrics, comm_account, consensus_gap,
                                dense_profile_bytes, downlink_elements, estimate_grad_variance,
                                gradient_mapping, potential, potential_descent_check, regularizer,
                                stationarity_residual)
from fedslr.linalg_prox import soft_threshold
from fedslr.model import Batch, ModelSpec, init_params
from fedslr.objectives import ModelObjective
from fedslr.reshape import Dense, ParamSet, Passthrough, factorize
from support import QUAD_KINDS, jacobi_svd, quad_setup, run_exact, scalar_quadratic


def rand(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return ParamSet.from_flat(QUAD_KINDS, scale * rng.normal(size=sum(k.size for k in QUAD_KINDS)))


def potential_history(objs, hp, w0, rounds):
    hist = []
    run_exact(objs, hp, w0, rounds, on_round=lambda s, c, i: hist.append(
        potential(objs, s.w, [x.local for x in c], [x.gamma for x in c], hp)))
    return hist


# --- potential ------------------------------------------------------------------

def test_potential_consensus_ignores_gamma():
    objs, hp, w = quad_setup(clients=3)
    base = np.mean([o.value(w) for o in objs]) + regularizer(w, hp.lam)
    for seed in range(3):
        gammas = [rand(seed * 10 + i) for i in range(3)]
        assert potential(objs, w, [w] * 3, gammas, hp) == pytest.approx(base, abs=1e-12)


def test_potential_plain_average_loss():
    objs, hp, w = quad_setup(clients=3, lam=0.0)
    zeros = [ParamSet.zeros(QUAD_KINDS)] * 3
    assert potential(objs, w, [w] * 3, zeros, hp) == pytest.approx(np.mean([o.value(w) for o in objs]))


def test_potential_term_by_term_oracle():
    objs, hp, w = quad_setup(clients=3)
    ys = [rand(20 + i) for i in range(3)]
    gs = [rand(30 + i) for i in range(3)]
    total = 0.0
    for o, y, g in zip(objs, ys, gs):
        d = w.flat() - y.flat()
        total += 0.5 * (y.flat() - o.a) @ o.H @ (y.flat() - o.a) + g.flat() @ d + d @ d / (2 * hp.eta_g)
    reg = hp.lam * sum(np.sum(jacobi_svd(v.reshape(k.matrix_shape))[1])
                       for k, v in zip(w.kinds, w.values) if isinstance(k, Dense))
    assert potential(objs, w, ys, gs, hp) == pytest.approx(total / 3 + reg, rel=1e-12)


def test_potential_shape_errors():
    objs, hp, w = quad_setup(clients=2)
    with pytest.raises(ValueError):
        potential(objs, w, [w], [w, w], hp)


# --- descent check --------------------------------------------------------------

def test_descent_check_reports_first_violation():
    rep = potential_descent_check([3.0, 2.0, 2.5, 1.0, 1.2])
    assert rep.violation == 2 and not rep.ok
    assert rep.deltas == pytest.approx([-1.0, 0.5, -1.5, 0.2])


def test_descent_from_stationary_start():
    objs, hp, w0 = quad_setup()
    server, clients = run_exact(objs, hp, w0, 800)
    hist = []
    run_state = {"server": server, "clients": clients}
    from fedslr.core import run_round
    for _ in range(10):
        s, _ = run_round(run_state["server"], clients, objs, hp, exact=True, fusion=False)
        run_state["server"] = s
        hist.append(potential(objs, s.w, [c.local for c in clients], [c.gamma for c in clients], hp))
    rep = potential_descent_check(hist)
    assert rep.ok and max(abs(d) for d in rep.deltas) <= 1e-12


def test_descent_holds_with_small_step():
    objs, hp, w0 = quad_setup()
    assert potential_descent_check(potential_history(objs, hp, w0, 30)).ok


def test_descent_can_fail_with_large_step():
    objs, hp, w0 = quad_setup(eta_scale=5.0)
    assert not potential_descent_check(potential_history(objs, hp, w0, 30)).ok


# --- gradient mapping -----------------------------------------------------------

def test_gradient_mapping_without_mu_is_gradient():
    rng = np.random.default_rng(0)
    spec = ModelSpec((4, 5), 3)
    obj = ModelObjective(spec, Batch(rng.normal(size=(10, 4)), rng.integers(0, 3, 10)))
    w, p = init_params(spec, rng), init_params(spec, rng)
    G = gradient_mapping(obj, w, p, HyperParams(mu=0.0))
    assert G.equal(obj.grad(w + p))


@pytest.mark.parametrize("a,w,mu", [(2.0, 0.5, 0.3), (-1.0, 0.4, 0.2), (0.3, 0.2, 0.5)])
def test_gradient_mapping_vanishes_at_lasso_fixed_point(a, w, mu):
    obj = scalar_quadratic(a)
    kinds = obj.kinds
    p_star = ParamSet.from_flat(kinds, soft_threshold(np.array([a - w]), mu))
    G = gradient_mapping(obj, ParamSet.from_flat(kinds, np.array([w])), p_star, HyperParams(eta_l=0.5, mu=mu))
    assert G.norm() <= 1e-8


def test_gradient_mapping_along_fusion_trajectory():
    objs, _, w = quad_setup(clients=1)
    hp = HyperParams(eta_l=0.1, mu=0.05, K_fusion=6)
    trace = []
    local_fusion(objs[0], w, rand(5), hp, np.random.default_rng(0), trace=trace)
    for pk, pk1 in zip(trace[:-1], trace[1:]):
        G = gradient_mapping(objs[0], w, pk, hp)
        assert (G - (pk - pk1) * (1.0 / hp.eta_l)).max_abs() <= 1e-12


# --- stationarity residual --------------------------------------------------------

def test_residual_zero_at_consensus():
    objs, hp, w = quad_setup(clients=3)
    assert stationarity_residual(objs, w, [w, w, w], hp) == 0.0


def test_residual_single_perturbed_client():
    objs, hp, w = quad_setup(clients=3)
    d = rand(7, 0.1)
    ys = [w, w + d, w]
    o = objs[1]
    r = (o.H @ w.flat() - o.H @ (w + d).flat() + d.flat() / hp.eta_g) / 3
    assert stationarity_residual(objs, w, ys, hp) == pytest.approx(np.linalg.norm(r), rel=1e-12)


def test_residual_and_gap_vanish_after_long_run():
    objs, hp, w0 = quad_setup()
    server, clients = run_exact(objs, hp, w0, 500)
    locals_ = [c.local for c in clients]
    assert stationarity_residual(objs, server.w, locals_, hp) <= 1e-4
    assert consensus_gap(server.w, locals_) <= 1e-4


# --- gradient variance ----------------------------------------------------------

def small_objective(features, labels):
    spec = ModelSpec((features.shape[1],), 2)
    return spec, ModelObjective(spec, Batch(features, labels))


def test_variance_full_batch_and_duplicates():
    rng = np.random.default_rng(0)
    spec, obj = small_objective(rng.normal(size=(6, 3)), rng.integers(0, 2, 6))
    w, p = init_params(spec, rng), ParamSet.zeros(spec.kinds)
    assert estimate_grad_variance(obj, w, p, 6, 4, rng) == 0.0
    spec, dup = small_objective(np.tile([[0.5, -1.0, 2.0]], (5, 1)), np.ones(5, dtype=int))
    assert estimate_grad_variance(dup, w, p, 2, 10, rng) == pytest.approx(0.0, abs=1e-28)


def test_variance_two_points_closed_form():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(2, 3)), np.array([0, 1])
    spec, obj = small_objective(X, y)
    w, p = init_params(spec, rng), init_params(spec, rng)
    g1 = ModelObjective(spec, Batch(X[:1], y[:1])).grad(w + p).flat()
    g2 = ModelObjective(spec, Batch(X[1:], y[1:])).grad(w + p).flat()
    expected = float(np.sum((g1 - g2) ** 2) / 4)
    assert estimate_grad_variance(obj, w, p, 1, 7, rng) == pytest.approx(expected, rel=1e-12)


def test_variance_argument_errors():
    rng = np.random.default_rng(2)
    spec, obj = small_objective(rng.normal(size=(3, 2)), np.array([0, 1, 0]))
    w = ParamSet.zeros(spec.kinds)
    with pytest.raises(ValueError):
        estimate_grad_variance(obj, w, w, 4, 3, rng)
    with pytest.raises(ValueError):
        estimate_grad_variance(obj, w, w, 1, 1, rng)


# --- communication accounting ------------------------------------------------------

def rank_r_dense(d1, d2, r, seed=0):
    rng = np.random.default_rng(seed)
    return ParamSet((Dense(d1, d2),), [(rng.normal(size=(d1, r)) @ rng.normal(size=(r, d2))).reshape(-1)])


def test_factorized_downlink_count():
    f = factorize(rank_r_dense(64, 64, 10))
    assert f.ranks == [10] and downlink_elements(f) == 1280


def test_min_rule_for_full_rank():
    f = factorize(rank_r_dense(6, 4, 4))
    assert f.element_count() == 40 > 24 == downlink_elements(f)


def test_ledger_totals_and_directions():
    w = ParamSet((Dense(64, 64), Passthrough(64)), rank_r_dense(64, 64, 10).values + [np.zeros(64)])
    ledger = CommLedger()
    for t in range(3):
        comm_account(factorize(w), w.size, "down", ledger, t, copies=10)
        comm_account(factorize(w), w.size, "up", ledger, t, copies=10)
    assert ledger.round_bytes(1, "down") == (1280 + 64) * 4 * 10
    assert ledger.round_bytes(1, "up") == w.size * 4 * 10
    assert ledger.downlink_total == sum(e["bytes"] for e in ledger.entries if e["direction"] == "down")
    assert ledger.uplink_total == sum(e["bytes"] for e in ledger.entries if e["direction"] == "up")
    with pytest.raises(ValueError):
        ledger.add(0, "sideways", 1)


def test_dense_profile_matches_reference_accounting():
    gb = dense_profile_bytes(11.17e6, 10, 1000) / 1e9
    assert abs(gb - 893.92) / 893.92 < 0.01
    assert dense_profile_bytes(11.17e6, 10, 1000, 2) == 2 * dense_profile_bytes(11.17e6, 10, 1000)


def test_round_metrics_row():
    m = RoundMetrics(round=3, ranks=[4, 2], downlink_bytes=10, uplink_bytes=20)
    row = m.as_row("fedavg", 1)
    assert row["mean_rank"] == 3.0 and row["potential"] is None and row["round"] == 3
    assert RoundMetrics(round=1).mean_rank is None
