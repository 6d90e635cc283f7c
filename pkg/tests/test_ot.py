import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from cmemd.core_math import pairwise_euclidean
from cmemd.errors import InvalidArgument, InvalidState, UnsupportedSize
from cmemd.ot import (
    SinkhornConfig,
    TransportPlan,
    adjusted_cost_monotonicity_check,
    exact_transport,
    hungarian,
    lexicographic_assignment,
    sinkhorn,
    transport_cost,
)
from oracles import brute_force_lp


def test_brute_force_lp_value_for_3x2():
    # the third row must split its mass across both columns at cost 1
    cost = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    v = np.full(3, 1 / 3)
    t = np.full(2, 1 / 2)
    assert brute_force_lp(cost, v, t) == pytest.approx(1 / 3, abs=1e-12)


def test_sinkhorn_single_cell():
    plan = sinkhorn([[3.7]])
    assert plan.plan.tolist() == [[1.0]]
    assert plan.converged


def test_sinkhorn_diagonal_plan():
    cost = np.array([[0.0, 10.0], [10.0, 0.0]])
    plan = sinkhorn(cost, cfg=SinkhornConfig(epsilon=0.01))
    np.testing.assert_allclose(np.diag(plan.plan), [0.5, 0.5], atol=1e-6)
    assert plan.plan[0, 1] < 1e-6 and plan.plan[1, 0] < 1e-6
    exact = exact_transport(cost)
    np.testing.assert_allclose(plan.plan, exact.plan, atol=1e-6)


def test_sinkhorn_constant_cost_is_independent_coupling():
    plan = sinkhorn(np.full((3, 4), 2.0))
    np.testing.assert_allclose(plan.plan, np.full((3, 4), 1 / 12), atol=1e-12)


def test_sinkhorn_errors():
    with pytest.raises(InvalidArgument):
        sinkhorn(np.ones((2, 3)), v=[0.5, 0.5], t=[0.5, 0.5])
    with pytest.raises(InvalidArgument):
        sinkhorn([[0.0, np.inf]])
    with pytest.raises(InvalidArgument):
        SinkhornConfig(epsilon=0)


def test_sinkhorn_non_converged_returns_last_iterate():
    rng = np.random.default_rng(0)
    plan = sinkhorn(rng.random((6, 6)), cfg=SinkhornConfig(epsilon=0.001, max_iterations=3))
    assert not plan.converged
    assert plan.iterations == 3
    assert plan.marginal_violation > 1e-6
    assert np.all(plan.plan >= 0)


def test_sinkhorn_deterministic():
    rng = np.random.default_rng(1)
    cost = rng.random((5, 7))
    a, b = sinkhorn(cost), sinkhorn(cost)
    assert np.array_equal(a.plan, b.plan)


@pytest.mark.parametrize("seed", range(10))
def test_sinkhorn_feasibility_general_marginals(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 9, size=2)
    v = rng.random(n) + 0.1
    t = rng.random(m) + 0.1
    cfg = SinkhornConfig(epsilon=0.05)
    plan = sinkhorn(rng.random((n, m)) * 5, v / v.sum(), t / t.sum(), cfg)
    assert plan.converged
    assert np.all(plan.plan >= 0)
    np.testing.assert_allclose(plan.plan.sum(axis=1), v / v.sum(), atol=cfg.tolerance)
    np.testing.assert_allclose(plan.plan.sum(axis=0), t / t.sum(), atol=cfg.tolerance)


def test_sinkhorn_scale_invariance():
    rng = np.random.default_rng(2)
    cost = rng.random((5, 5))
    base = sinkhorn(cost, cfg=SinkhornConfig(epsilon=0.2, normalize_cost=False, tolerance=1e-12))
    for lam in (0.5, 3.0, 40.0):
        scaled = sinkhorn(lam * cost, cfg=SinkhornConfig(epsilon=0.2 * lam, normalize_cost=False,
                                                          tolerance=1e-12))
        np.testing.assert_allclose(scaled.plan, base.plan, atol=1e-9)


def test_sinkhorn_converges_to_exact_as_epsilon_shrinks():
    rng = np.random.default_rng(4)
    for _ in range(5):
        cost = rng.random((8, 8))
        exact = transport_cost(exact_transport(cost), cost)
        costs = []
        for eps in (1.0, 0.1, 0.01, 0.001):
            plan = sinkhorn(cost, cfg=SinkhornConfig(epsilon=eps, max_iterations=100000))
            costs.append(transport_cost(plan, cost))
        gaps = [c - exact for c in costs]
        assert all(g >= -1e-9 for g in gaps)
        assert all(a >= b - 1e-9 for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] / exact <= 1e-3


def test_transport_cost_examples():
    assert transport_cost(np.full((2, 2), 0.25), np.full((2, 2), 3.0)) == pytest.approx(3.0)
    assert transport_cost([[0.5, 0], [0, 0.5]], [[0, 10], [10, 0]]) == 0.0
    assert transport_cost(np.full((2, 2), 0.25), [[1, 2], [3, 4]]) == pytest.approx(2.5)
    with pytest.raises(InvalidArgument):
        transport_cost(np.ones((2, 2)), np.ones((2, 3)))


def test_hungarian_matches_brute_force_and_scipy():
    rng = np.random.default_rng(7)
    for n in range(1, 7):
        for _ in range(10):
            cost = rng.integers(0, 5, size=(n, n)).astype(float)
            perm, u, v = hungarian(cost)
            best = min(sum(cost[i, p[i]] for i in range(n))
                       for p in itertools.permutations(range(n)))
            assert cost[np.arange(n), perm].sum() == pytest.approx(best)
            assert np.all(cost - u[:, None] - v[None, :] >= -1e-9)
            np.testing.assert_allclose(cost[np.arange(n), perm] - u - v[perm], 0, atol=1e-9)
    for _ in range(5):
        cost = rng.random((30, 30))
        r, c = linear_sum_assignment(cost)
        perm, _, _ = hungarian(cost)
        assert cost[np.arange(30), perm].sum() == pytest.approx(cost[r, c].sum(), abs=1e-12)


def test_lexicographic_tie_breaking():
    rng = np.random.default_rng(8)
    for _ in range(20):
        cost = rng.integers(0, 3, size=(5, 5)).astype(float)
        perms = list(itertools.permutations(range(5)))
        values = [sum(cost[i, p[i]] for i in range(5)) for p in perms]
        best = min(values)
        expected = min(p for p, val in zip(perms, values) if val == best)
        assert tuple(lexicographic_assignment(cost)) == expected


def test_exact_transport_examples():
    plan = exact_transport([[0, 10], [10, 0]])
    np.testing.assert_array_equal(plan.plan, [[0.5, 0], [0, 0.5]])
    cost = np.array([[1.0, 2.0], [3.0, 4.0]])
    plan = exact_transport(cost)
    assert transport_cost(plan, cost) == pytest.approx(2.5)
    # both permutations tie; the lexicographically smallest one is the identity
    np.testing.assert_array_equal(plan.plan, [[0.5, 0], [0, 0.5]])


def test_exact_transport_general_marginals_against_enumeration():
    cost = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    v, t = np.full(3, 1 / 3), np.full(2, 1 / 2)
    plan = exact_transport(cost, v, t)
    assert transport_cost(plan, cost) == pytest.approx(1 / 3, abs=1e-9)
    assert plan.marginal_violation < 1e-9
    rng = np.random.default_rng(9)
    for _ in range(5):
        n, m = rng.integers(2, 4, size=2)
        cost = rng.random((n, m))
        v = rng.random(n) + 0.2
        t = rng.random(m) + 0.2
        v, t = v / v.sum(), t / t.sum()
        got = transport_cost(exact_transport(cost, v, t), cost)
        assert got == pytest.approx(brute_force_lp(cost, v, t), abs=1e-9)


def test_exact_transport_size_guard():
    with pytest.raises(UnsupportedSize):
        exact_transport(np.ones((65, 65)))
    with pytest.raises(UnsupportedSize):
        exact_transport(np.ones((7, 6)))


def test_monotonicity_examples():
    assert adjusted_cost_monotonicity_check(sinkhorn([[2.0]]), [[2.0]])
    const = np.full((4, 4), 1.5)
    assert adjusted_cost_monotonicity_check(sinkhorn(const), const)
    rng = np.random.default_rng(11)
    cost = rng.random((5, 5))
    assert adjusted_cost_monotonicity_check(sinkhorn(cost, cfg=SinkhornConfig(epsilon=0.1)), cost)


def test_monotonicity_detects_violation_and_missing_potentials():
    cost = np.array([[0.0, 1.0]])
    bad = TransportPlan(np.array([[0.2, 0.8]]), True, 0, 0.0, np.zeros(1), np.zeros(2))
    assert not adjusted_cost_monotonicity_check(bad, cost)
    with pytest.raises(InvalidState):
        adjusted_cost_monotonicity_check(exact_transport([[0.0, 1.0], [1.0, 0.0]]), cost)


def test_plan_follows_closed_form():
    rng = np.random.default_rng(12)
    cost = pairwise_euclidean(rng.normal(size=(6, 3)), rng.normal(size=(5, 3)))
    plan = sinkhorn(cost)
    closed = np.exp((plan.row_potential[:, None] + plan.col_potential[None, :] - cost) / plan.epsilon)
    np.testing.assert_allclose(plan.plan, closed, rtol=1e-12)


def test_spearman_negative_on_most_instances():
    negative = 0
    for seed in range(100):
        cost = np.random.default_rng(seed).random((8, 8))
        plan = sinkhorn(cost, cfg=SinkhornConfig(epsilon=0.1))
        rho = spearmanr(plan.plan.ravel(), cost.ravel()).statistic
        negative += rho < 0
    assert negative >= 95
