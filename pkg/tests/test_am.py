import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvjlcm.am import AmState, am_accept, am_propose

from oracles import am_gaussian_errors


def test_pre_adaptation_covariance_is_fixed():
    am = AmState(dim=4)
    am.update(np.arange(4.0))
    assert am.m == 1
    cov = am.proposal_covariance()[0]
    np.testing.assert_array_equal(cov, (0.1**2 / 4) * np.eye(4))
    np.testing.assert_allclose(cov, 0.0025 * np.eye(4), rtol=1e-15)


def test_fixed_component_until_twice_dimension():
    am = AmState(dim=3)
    rng = np.random.default_rng(0)
    for _ in range(6):
        am.update(rng.standard_normal(3) * 100)
        assert not am.adapting
    am.update(np.zeros(3))
    assert am.adapting


def test_pre_adaptation_steps_have_fixed_scale():
    am = AmState(dim=2)
    am.update(np.zeros(2))
    rng = np.random.default_rng(1)
    steps = np.array([am_propose(np.zeros(2), am, rng) for _ in range(20_000)])
    np.testing.assert_allclose(np.cov(steps.T), 0.005 * np.eye(2), atol=3e-4)


def test_alpha_one_always_uses_fixed_component():
    am = AmState(dim=2, alpha_prop=1.0)
    rng = np.random.default_rng(2)
    for _ in range(50):
        am.update(rng.standard_normal(2) * 1e3)  # huge empirical covariance
    steps = np.array([am_propose(np.zeros(2), am, rng) for _ in range(5_000)])
    assert np.abs(steps).max() < 0.1 / np.sqrt(2) * 6


def test_empirical_covariance_tracks_gaussian():
    cov = np.array([[2.0, -0.7], [-0.7, 0.5]])
    rng = np.random.default_rng(3)
    am = AmState(dim=2)
    for x in rng.multivariate_normal([0.5, 1.0], cov, size=10_000):
        am.update(x)
    err = np.linalg.norm(am.empirical_cov()[0] - cov) / np.linalg.norm(cov)
    assert err < 0.05


def test_batched_chains_adapt_independently():
    rng = np.random.default_rng(4)
    am = AmState(dim=1, batch=2)
    for _ in range(5_000):
        am.update(np.array([[rng.normal(0, 1)], [rng.normal(0, 3)]]))
    np.testing.assert_allclose(am.empirical_cov()[:, 0, 0], [1.0, 9.0], rtol=0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_identical_proposal_always_accepted(x):
    x = np.array(x)
    rng = np.random.default_rng(0)
    for _ in range(20):
        acc, new, _ = am_accept(lambda v: np.array([-0.5 * v @ v]), x, [-0.5 * x @ x], x, rng)
        assert acc[0]
        np.testing.assert_array_equal(new, x)


def test_out_of_support_proposal_rejected():
    def target(v):
        return np.array([-np.inf if v[0] <= 0 else -v[0]])

    rng = np.random.default_rng(0)
    x = np.array([1.0])
    for _ in range(1000):
        acc, new, _ = am_accept(target, x, target(x), np.array([-0.2]), rng)
        assert not acc[0] and new[0] == 1.0


def test_non_finite_current_is_rejected():
    from tvjlcm.errors import StateError

    with pytest.raises(StateError):
        am_accept(lambda v: np.array([0.0]), np.zeros(1), [-np.inf], np.ones(1), np.random.default_rng(0))


def test_known_gaussian_recovered():
    mean_err, cov_err, acc = am_gaussian_errors(n_post=20_000, burn=2_000, seed=8)
    assert mean_err < 0.1
    assert cov_err < 0.15
    assert 0.1 < acc < 0.9
