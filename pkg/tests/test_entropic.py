import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairwash.data import Dataset, GroupCounts, disparate_impact, group_counts
from fairwash.entropic import (InfeasibleTargetError, MomentConstraint, delta_split, di_phi,
                               fairwash_entropic, log_partition, solve_tilt)

from oracles import kl_to_uniform, primal_tilt


def dataset_from_counts(n0, n1, l0, l1):
    S = np.r_[np.zeros(n0), np.ones(n1)].astype(int)
    Y = np.r_[np.ones(l0), np.zeros(n0 - l0), np.ones(l1), np.zeros(n1 - l1)].astype(int)
    return Dataset(X=np.arange(n0 + n1, dtype=float)[:, None], S=S, Yhat=Y)


def test_log_partition_derivatives():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(7, 3))
    xi = rng.normal(size=3)
    logZ, mean, cov = log_partition(phi, xi)
    eps = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        fd = (log_partition(phi, xi + e)[0] - log_partition(phi, xi - e)[0]) / (2 * eps)
        assert fd == pytest.approx(mean[j], abs=1e-8)
        fd2 = (log_partition(phi, xi + e)[1] - log_partition(phi, xi - e)[1]) / (2 * eps)
        np.testing.assert_allclose(fd2, cov[:, j], atol=1e-7)


def test_target_equal_to_mean_gives_uniform():
    phi = np.random.default_rng(1).normal(size=(6, 2))
    sol = solve_tilt(MomentConstraint(phi, phi.mean(axis=0)))
    np.testing.assert_allclose(sol.weights, 1 / 6)
    assert sol.kl == pytest.approx(0.0, abs=1e-14)


def test_gibbs_form_and_primal_oracle():
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(8, 2))
    w_star = rng.dirichlet(np.ones(8))
    t = w_star @ phi
    sol = solve_tilt(MomentConstraint(phi, t), tol=1e-12)
    np.testing.assert_allclose(sol.weights, np.exp(phi @ sol.xi - sol.log_partition) / 8, rtol=1e-9)
    ref = primal_tilt(phi, t, w_star)
    assert sol.kl == pytest.approx(kl_to_uniform(ref), abs=1e-9)


def test_target_outside_hull():
    phi = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(InfeasibleTargetError):
        solve_tilt(MomentConstraint(phi, [3.0]))
    with pytest.raises(InfeasibleTargetError):
        solve_tilt(MomentConstraint(phi, [-0.5]))


def test_two_atom_closed_form():
    sol = solve_tilt(MomentConstraint(np.array([0.0, 1.0]), [0.8]))
    np.testing.assert_allclose(sol.weights, [0.2, 0.8], atol=1e-9)
    assert sol.xi[0] == pytest.approx(np.log(4.0), abs=1e-8)


def test_kl_closed_form_equals_dual_value():
    rng = np.random.default_rng(4)
    phi = rng.normal(size=(8, 3))
    t = rng.dirichlet(np.ones(8)) @ phi
    sol = solve_tilt(MomentConstraint(phi, t), tol=1e-12)
    # at the optimum KL(Q_t, Q_n) = <xi, t> - log Z(xi)
    assert sol.kl == pytest.approx(sol.xi @ t - sol.log_partition, abs=1e-10)


def test_kl_grows_with_target():
    d = dataset_from_counts(80, 120, 10, 60)
    for mode in ("balanced", "proportional"):
        kls = []
        for t in np.linspace(0.3, 1.2, 8):
            q = fairwash_entropic(d, t, mode)
            assert np.all(q.weights > 0)
            kls.append(float(np.sum(q.weights * np.log(q.n * q.weights))))
        assert np.all(np.diff(kls) >= -1e-12)


def test_dependent_constraints_are_reduced():
    rng = np.random.default_rng(3)
    s = rng.integers(0, 2, 20).astype(float)
    phi = np.column_stack([s, 1 - s])  # columns sum to one
    sol = solve_tilt(MomentConstraint(phi, [0.7, 0.3]))
    assert sol.residual <= 1e-9
    with pytest.raises(InfeasibleTargetError):
        solve_tilt(MomentConstraint(phi, [0.7, 0.4]))


def test_delta_split_hand_case():
    c = GroupCounts(100, 100, 10, 40)
    d = dataset_from_counts(100, 100, 10, 40)
    assert disparate_impact(c) == 0.25
    for mode in ("balanced", "proportional"):
        q = fairwash_entropic(d, 0.5, mode)
        assert disparate_impact(q) == pytest.approx(0.5, abs=1e-12)
    d0, d1 = delta_split(c, 0.25, "balanced")
    assert d0 == d1
    assert (10 + d0) / (40 - d1) == pytest.approx(0.5)


def test_proportional_split_ratio():
    c = GroupCounts(60, 140, 9, 70)
    d0, d1 = delta_split(c, 0.3, "proportional")
    assert d0 / 60 == pytest.approx(d1 / 140)
    di = ((9 + d0) / 60) / ((70 - d1) / 140)
    assert di == pytest.approx(disparate_impact(c) + 0.3)


def test_group_sizes_preserved():
    d = dataset_from_counts(30, 50, 5, 25)
    q = fairwash_entropic(d, 0.8, "balanced")
    c = group_counts(q)
    assert c.n0 == pytest.approx(30) and c.n1 == pytest.approx(50)


def test_infeasible_split():
    with pytest.raises(InfeasibleTargetError):
        delta_split(GroupCounts(10, 10, 9, 5), 5.0, "proportional")
    with pytest.raises(InfeasibleTargetError):
        delta_split(GroupCounts(10, 10, 2, 0), 0.1)


def test_target_below_current_rejected():
    d = dataset_from_counts(10, 10, 2, 5)
    with pytest.raises(ValueError):
        fairwash_entropic(d, 0.1)


def test_example_with_unit_di_is_already_fair():
    # one row per bin: DI is already 1, so any target DI < 1 lies below it
    d = Dataset(X=np.eye(4)[:, :2], S=[0, 0, 1, 1], Yhat=[0, 1, 0, 1])
    assert disparate_impact(d) == 1.0
    with pytest.raises(ValueError):
        fairwash_entropic(d, 0.8)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.data())
def test_random_counts_hit_target(n0, n1, data):
    l0 = data.draw(st.integers(0, n0 - 1))
    l1 = data.draw(st.integers(1, n1))
    di0 = disparate_impact(GroupCounts(n0, n1, l0, l1))
    frac = data.draw(st.floats(0.05, 0.9))
    mode = data.draw(st.sampled_from(["balanced", "proportional"]))
    d = dataset_from_counts(n0, n1, l0, l1)
    # the largest DI reachable while keeping both groups strictly inside (0, 1)
    target = di0 + frac * 1.0
    try:
        delta_split(GroupCounts(n0, n1, l0, l1), target - di0, mode)
    except InfeasibleTargetError:
        return
    if l1 == n1 or l0 == 0:
        return  # a positive-free or saturated bin cannot be reweighted
    q = fairwash_entropic(d, target, mode)
    assert disparate_impact(q) == pytest.approx(target, abs=1e-8)
