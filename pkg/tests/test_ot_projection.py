import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairwash.data import Dataset, disparate_impact
from fairwash.model import Classifier
from fairwash.ot_projection import (ConstraintUnreachableError, ProjectionConfig, check_slackness,
                                    fairwash_grad, grad_slackness, group_targets, objective,
                                    project_point, snap_1d)

from conftest import annotated_synthetic


def logistic_model(w=(1.5, -0.5), b=-0.2, threshold=0.5):
    return Classifier.logistic(np.asarray(w, float), b, threshold=threshold)


def test_zero_lambda_is_identity():
    m = logistic_model()
    z = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(project_point(m, z, 0.0, +1), z)


def test_logistic_displacement_is_colinear_with_weights():
    w = np.array([1.5, -0.5])
    m = logistic_model(w)
    z = np.array([0.3, 0.7])
    x = project_point(m, z, 2.0, +1)
    disp = x - z
    cos = disp @ w / (np.linalg.norm(disp) * np.linalg.norm(w))
    assert cos == pytest.approx(1.0, abs=1e-12)
    x = project_point(m, z, 2.0, -1)
    assert (x - z) @ w < 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0), st.sampled_from([-1, 1]))
def test_objective_non_increasing(seed, lam, direction):
    # descent is guaranteed when eta <= 1 / (2 + lam * sup|f''|); for a logistic
    # score sup|f''| <= |w|^2 / 10, so |w| <= 3 and lam <= 2 keep eta = 0.25 safe
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= rng.uniform(0.1, 3.0) / np.linalg.norm(w)
    m = Classifier.logistic(w, rng.normal())
    z = rng.normal(size=(4, 3))
    prev = objective(m, z, z, lam, direction)
    eta = 0.25
    x = z.copy()
    for _ in range(10):
        x = x - eta * (2 * (x - z) - lam * direction * m.grad_input(x))
        eta /= 1.2
        cur = objective(m, z, x, lam, direction)
        assert np.all(cur <= prev + 1e-12)
        prev = cur
    np.testing.assert_allclose(x, project_point(m, z, lam, direction), atol=1e-12)


def test_snap_examples():
    vals = [np.array([0.0, 1.0, 2.0])]
    assert snap_1d(np.array([1.0002]), vals)[0] == 1.0
    assert snap_1d(np.array([1.5]), vals)[0] == 1.0  # tie goes down
    assert snap_1d(np.array([-3.0]), vals)[0] == 0.0
    assert snap_1d(np.array([9.0]), vals)[0] == 2.0
    X = snap_1d(np.array([[0.4, 7.0], [1.6, 3.4]]), [np.array([0.0, 1.0, 2.0]), np.array([3.0, 7.0])])
    np.testing.assert_array_equal(X, [[0.0, 7.0], [2.0, 3.0]])


def test_check_slackness_cases():
    assert check_slackness([0.0], [0.2], [0.5]).residual == 0.0  # inactive, lambda 0
    r = check_slackness([3.0], [0.4], [0.4])
    assert r.residual == 0.0 and r.feasible
    r = check_slackness([3.0], [0.4], [0.3])
    assert not r.feasible and r.residual == pytest.approx(0.3)


def test_group_targets_integer_flips():
    S = np.r_[np.zeros(100), np.ones(100)].astype(int)
    Y = np.r_[np.ones(10), np.zeros(90), np.ones(40), np.zeros(60)].astype(int)
    d = Dataset(X=np.zeros((200, 1)), S=S, Yhat=Y)
    t = group_targets(d, 0.5, "balanced")
    assert t.flips0 == t.flips1 == 7  # delta = 20/3
    assert ((10 + t.flips0) / (40 - t.flips1)) >= 0.5
    assert group_targets(d, 0.2, "balanced").flips0 == 0


def test_requires_annotated_data():
    d, m = annotated_synthetic(400, 3)
    with pytest.raises(ValueError):
        fairwash_grad(d.replace(Yhat=1 - d.Yhat), m)


@pytest.mark.parametrize("mode", ["balanced", "proportional"])
@pytest.mark.parametrize("variant_1d", [False, True])
def test_grad_reaches_target_with_slackness(mode, variant_1d):
    d, m = annotated_synthetic(600, 1)
    res = fairwash_grad(d, m, ProjectionConfig(target_di=0.8, mode=mode, variant_1d=variant_1d))
    assert res.achieved_di >= 0.8 - 1e-12
    assert disparate_impact(res.data) == res.achieved_di
    for r, rep in zip(res.info["groups"], grad_slackness(res)):
        assert r.lambda_star >= 0
        assert rep.feasible and rep.residual <= 1e-6
    # only the modified rows changed, and S is untouched
    changed = np.flatnonzero(np.any(res.data.X != d.X, axis=1))
    assert set(changed) <= set(res.modified_rows)
    np.testing.assert_array_equal(res.data.S, d.S)
    if variant_1d:
        for j in range(d.d):
            assert set(np.unique(res.data.X[:, j])) <= set(np.unique(d.X[:, j]))


def test_constant_model_is_unreachable():
    m = Classifier.logistic(np.zeros(2), -5.0)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    S = np.r_[np.zeros(20), np.ones(20)].astype(int)
    d = m.annotate(Dataset(X=X, S=S, Yhat=np.zeros(40, int)))
    d = d.replace(Yhat=np.r_[np.zeros(20), np.ones(20)].astype(int))
    # Yhat now disagrees with the model, which predicts 0 everywhere
    with pytest.raises(ValueError):
        fairwash_grad(d, m)


def test_lambda_cap():
    # a flat score never crosses the threshold
    m = Classifier.logistic(np.array([1e-12, 0.0]), 0.0, threshold=0.5)
    S = np.r_[np.zeros(10), np.ones(10)].astype(int)
    X = np.zeros((20, 2))
    X[15:, 0] = 1e12  # these score above 0.5
    d = m.annotate(Dataset(X=X, S=S, Yhat=np.zeros(20, int)))
    assert disparate_impact(d) == 0.0
    with pytest.raises(ConstraintUnreachableError):
        fairwash_grad(d, m, ProjectionConfig(target_di=0.8, lambda_cap_factor=2.0 ** 10))


def test_target_at_current_di_is_noop():
    d, m = annotated_synthetic(600, 1)
    res = fairwash_grad(d, m, ProjectionConfig(target_di=disparate_impact(d)))
    assert res.modified_rows.size == 0
    np.testing.assert_array_equal(res.data.X, d.X)
