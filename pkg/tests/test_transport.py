import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectkit import diffcore as dc
from affectkit.transport import (
    CostMatrix,
    TransportError,
    brute_force_assignment,
    cost_from_similarity,
    ot_loss,
    sinkhorn,
)


def _random_cost(n, seed, m=None):
    return CostMatrix.uniform(np.random.default_rng(seed).uniform(0, 2, size=(n, m or n)))


def _unique_optimum_cost(n, seed, gap=0.05):
    """Random cost whose best assignment beats the runner-up by at least ``gap`` in mean cost."""
    rng = np.random.default_rng(seed)
    while True:
        W = rng.uniform(0, 2, size=(n, n))
        costs = sorted(W[np.arange(n), p].sum() / n for p in itertools.permutations(range(n)))
        if len(costs) == 1 or costs[1] - costs[0] >= gap:
            return CostMatrix.uniform(W)


def test_cost_from_identity_and_ones():
    c = cost_from_similarity(np.eye(2))
    assert np.array_equal(c.values, [[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(c.a, [0.5, 0.5]) and np.array_equal(c.b, [0.5, 0.5])
    assert np.array_equal(cost_from_similarity(np.ones((3, 2))).values, np.zeros((3, 2)))


def test_cost_elementwise_subtraction():
    S = np.random.default_rng(0).uniform(-1, 1, size=(3, 4))
    c = cost_from_similarity(S)
    for i in range(3):
        for j in range(4):
            assert c.values[i, j] == 1.0 - S[i, j]
    assert c.a.sum() == pytest.approx(1.0, abs=1e-12) and c.b.shape == (4,)


def test_cost_validation():
    with pytest.raises(TransportError):
        CostMatrix(np.zeros((2, 2)), np.array([0.5, 0.5]), np.array([1.0]))
    with pytest.raises(TransportError):
        CostMatrix(np.zeros((2, 2)), np.array([0.7, 0.7]), np.array([0.5, 0.5]))
    with pytest.raises(TransportError):
        CostMatrix(np.zeros((2, 2)), np.array([1.5, -0.5]), np.array([0.5, 0.5]))
    with pytest.raises(TransportError):
        cost_from_similarity(np.ones(3))


def test_single_cell_plan():
    plan = sinkhorn(CostMatrix.uniform([[0.7]]), 0.05)
    assert plan.values.tolist() == [[1.0]]
    assert plan.converged


def test_two_by_two_closed_form():
    plan = sinkhorn(cost_from_similarity(np.eye(2)), 0.1)
    on = 0.5 / (1 + math.exp(-10))
    off = 0.5 * math.exp(-10) / (1 + math.exp(-10))
    assert np.allclose(plan.values, [[on, off], [off, on]], atol=1e-12)
    assert plan.values[0, 0] == pytest.approx(0.49998, abs=1e-5)
    assert plan.values[0, 1] == pytest.approx(2.27e-5, abs=1e-7)


def test_small_epsilon_concentrates_on_brute_force_permutation():
    cost = _unique_optimum_cost(4, seed=11)
    perm, best = brute_force_assignment(cost)
    plan = sinkhorn(cost, 1e-3)
    assert tuple(np.argmax(plan.values, axis=1)) == perm
    assert plan.cost(cost.values) == pytest.approx(best, abs=1e-3)


def test_brute_force_examples():
    assert brute_force_assignment(np.array([[0.0, 1.0], [1.0, 0.0]])) == ((0, 1), 0.0)
    assert brute_force_assignment(1 - np.eye(3)) == ((0, 1, 2), 0.0)
    # ties resolve to the lexicographically first permutation
    assert brute_force_assignment(np.zeros((3, 3)))[0] == (0, 1, 2)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_brute_force_matches_reversed_enumeration(seed):
    W = np.random.default_rng(seed).uniform(0, 2, size=(5, 5))
    perm, best = brute_force_assignment(W)
    rev = min(W[np.arange(5), p].sum() for p in reversed(list(itertools.permutations(range(5)))))
    assert best == pytest.approx(rev / 5, abs=1e-15)
    assert W[np.arange(5), perm].sum() / 5 == pytest.approx(best, abs=1e-15)


def test_brute_force_errors():
    with pytest.raises(TransportError):
        brute_force_assignment(np.zeros((9, 9)))
    with pytest.raises(TransportError):
        brute_force_assignment(np.zeros((2, 3)))


def test_non_positive_epsilon():
    with pytest.raises(TransportError):
        sinkhorn(_random_cost(3, 0), 0.0)


def test_forced_plain_mode_reports_underflow():
    with pytest.raises(TransportError, match="log_domain"):
        sinkhorn(CostMatrix.uniform([[1.0, 1.0], [1.0, 1.0]]), 1e-3, log_domain=False)


def test_log_domain_engages_automatically():
    plan = sinkhorn(cost_from_similarity(np.eye(3)), 1e-3)
    assert plan.log_domain
    assert plan.converged
    assert np.allclose(plan.values, np.eye(3) / 3, atol=1e-12)
    plan = sinkhorn(_random_cost(4, 3), 1e-4)
    assert plan.log_domain
    assert np.all(np.isfinite(plan.values)) and np.all(plan.values >= 0)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6), st.sampled_from([1.0, 0.1, 0.05]))
@settings(max_examples=40, deadline=None)
def test_log_and_plain_solvers_agree(seed, r, c, eps):
    cost = _random_cost(r, seed, c)
    plain = sinkhorn(cost, eps, log_domain=False)
    logd = sinkhorn(cost, eps, log_domain=True)
    assert np.allclose(plain.values, logd.values, atol=1e-8)


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8), st.sampled_from([1.0, 0.1, 0.05, 0.01]))
@settings(max_examples=50, deadline=None)
def test_feasibility_and_monotone_violation(seed, r, c, eps):
    cost = _random_cost(r, seed, c)
    plan = sinkhorn(cost, eps)
    assert np.all(plan.values >= 0)
    if plan.converged:
        assert plan.violation < 1e-9
        assert np.max(np.abs(plan.values.sum(axis=1) - cost.a)) < 1e-9
        assert np.max(np.abs(plan.values.sum(axis=0) - cost.b)) < 1e-9
    h = plan.history
    assert all(h[k + 1] <= h[k] * (1 + 1e-9) + 1e-15 for k in range(len(h) - 1))


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=15, deadline=None)
def test_epsilon_limit_reaches_assignment_optimum(seed, n):
    cost = _unique_optimum_cost(n, seed)
    _, best = brute_force_assignment(cost)
    plans = [sinkhorn(cost, eps) for eps in (1.0, 0.1, 0.01, 0.001)]
    values = [p.cost(cost.values) for p in plans]
    for k in range(3):
        # small-eps solves can stop at max_iters; allow the cost shift their infeasibility permits
        slack = 2 * n * cost.values.max() * (plans[k].violation + plans[k + 1].violation) + 1e-12
        assert values[k + 1] <= values[k] + slack
    assert values[-1] == pytest.approx(best, abs=1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_entropy_decreases_with_epsilon(seed):
    cost = _random_cost(5, seed)
    e_big = sinkhorn(cost, 0.5).entropy()
    e_small = sinkhorn(cost, 0.05).entropy()
    assert e_big >= e_small - 1e-12


def test_warm_start_reaches_same_plan_faster():
    cost = _random_cost(8, 5)
    cold = sinkhorn(cost, 0.2)
    nudged = CostMatrix.uniform(cost.values + 1e-3 * np.random.default_rng(1).normal(size=(8, 8)))
    ref = sinkhorn(nudged, 0.2)
    warm = sinkhorn(nudged, 0.2, init=cold.scaling)
    assert ref.converged and warm.converged
    assert np.allclose(warm.values, ref.values, atol=1e-9)
    assert warm.iterations < ref.iterations


def test_invalid_warm_start_is_ignored():
    cost = _random_cost(3, 0)
    ref = sinkhorn(cost, 0.1)
    assert np.array_equal(sinkhorn(cost, 0.1, init=np.array([1.0, -1.0, 1.0])).values, ref.values)
    assert np.array_equal(sinkhorn(cost, 0.1, init=np.ones(5)).values, ref.values)


def test_plan_json_export():
    plan = sinkhorn(cost_from_similarity(np.eye(2)), 0.1)
    d = json.loads(plan.to_json())
    assert set(d) >= {"shape", "epsilon", "iterations", "violation", "values"}
    assert d["shape"] == [2, 2]
    assert np.allclose(d["values"], plan.values, atol=0)


def _ref_ot_loss(P, S):
    L = P * S
    n = L.shape[0]
    rows = sum(-math.log(math.exp(L[i, i]) / sum(math.exp(L[i, j]) for j in range(n))) for i in range(n)) / n
    cols = sum(-math.log(math.exp(L[i, i]) / sum(math.exp(L[j, i]) for j in range(n))) for i in range(n)) / n
    return (rows + cols) / 2


def test_ot_loss_closed_form():
    got = ot_loss(np.diag([0.5, 0.5]), np.eye(2)).item()
    assert got == pytest.approx(math.log(1 + math.exp(-0.5)), abs=1e-12)
    assert got == pytest.approx(0.4741, abs=1e-4)


def test_ot_loss_uniform_logits_give_log_r():
    plan = np.full((4, 4), 0.25)
    assert ot_loss(plan, np.ones((4, 4))).item() == pytest.approx(math.log(4), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ot_loss_matches_reference_and_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, size=(3, 3))
    plan = sinkhorn(cost_from_similarity(S), 0.05)
    got = ot_loss(plan, S).item()
    assert got >= 0
    assert got == pytest.approx(_ref_ot_loss(plan.values, S), abs=1e-12)


def test_ot_loss_identity_is_minimal_among_diagonal_dominant():
    rng = np.random.default_rng(0)
    P = np.eye(3) / 3
    best = ot_loss(P, np.eye(3)).item()
    for _ in range(50):
        S = rng.uniform(-1, 1, size=(3, 3))
        np.fill_diagonal(S, 1.0)
        S = np.minimum(S, 1.0)
        assert ot_loss(P, S).item() >= best - 1e-12


def test_ot_loss_errors_and_detached_plan():
    with pytest.raises(TransportError):
        ot_loss(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(TransportError):
        ot_loss(np.ones((3, 3)), np.ones((2, 2)))
    g = dc.Graph()
    S = g.param(np.random.default_rng(0).uniform(-1, 1, size=(3, 3)))
    plan = sinkhorn(cost_from_similarity(S.value), 0.1)
    loss = ot_loss(plan, S, scale=2.0)
    grads = dc.backward(loss)
    assert grads[S].shape == (3, 3)

    def f(s):
        return ot_loss(plan, s, scale=2.0)

    assert dc.grad_check(f, [S.value]) < 1e-6
