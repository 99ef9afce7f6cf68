import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvjlcm.errors import DomainError
from tvjlcm.model import cumulative_hazard
from tvjlcm.simulation import (
    ClassParams,
    SimDesign,
    invert_survival_time,
    jump_pattern,
    simulate_aids_like,
    simulate_dataset,
    subject_jump_patterns,
)

from oracles import inversion_checks


def test_uniform_near_one_gives_early_event():
    assert invert_survival_time(1 - 1e-12, 1.0, 0.2, -0.3, 0.2, 0.5) < 1e-10


def test_zero_slope_is_exponential():
    got = invert_survival_time(0.3, 1.0, 0.2, 0.0, 0.2, 0.5)
    assert got == pytest.approx(-math.log(0.3) / (0.2 * math.exp(0.5 + 0.2)), rel=1e-14)


def test_negative_slope_can_escape():
    # cumulative hazard bounded by scale/|b| never reaches -log u
    assert invert_survival_time(1e-6, 0.0, 0.0, -5.0, 0.1, 0.0) == math.inf


@pytest.mark.parametrize("u", [0.0, 1.0, -0.2, 1.5])
def test_uniform_outside_unit_interval(u):
    with pytest.raises(DomainError):
        invert_survival_time(u, 1.0, 0.0, 0.0, 0.2, 0.5)


@settings(max_examples=200, deadline=None)
@given(
    v=st.floats(1e-6, 1 - 1e-6),
    x3=st.sampled_from([0.0, 1.0]),
    u1=st.floats(-2, 2),
    u2=st.floats(-2, 2),
    lam=st.floats(0.05, 2),
    w=st.floats(-1, 1),
)
def test_inversion_identity(v, x3, u1, u2, lam, w):
    T = invert_survival_time(v, x3, u1, u2, lam, w)
    if math.isfinite(T) and T > 0:
        H = cumulative_hazard(T, [x3], [w], [1.0, 1.0], [u1, u2], [lam], [0.0])
        assert H == pytest.approx(-math.log(v), rel=1e-9, abs=1e-12)


def test_inversion_distribution():
    identity, sup = inversion_checks(n=30_000, seed=1)
    assert identity < 1e-8
    assert sup < 0.02


def test_design_validation():
    with pytest.raises(DomainError):
        SimDesign(censor_mean=0)
    with pytest.raises(DomainError):
        SimDesign(time_grid=(0.0, 0.1, 0.1))
    with pytest.raises(DomainError):
        SimDesign(min_visits=40)


def test_deterministic_and_seed_sensitive():
    a, ta = simulate_dataset(SimDesign(seed=3))
    b, tb = simulate_dataset(SimDesign(seed=3))
    c, _ = simulate_dataset(SimDesign(seed=4))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ta.r, tb.r)
    assert a.n != c.n or not np.array_equal(a.y, c.y)


@pytest.mark.parametrize("seed", range(12))
def test_dataset_invariants_and_censoring(seed):
    data, truth = simulate_dataset(SimDesign(seed=seed))
    data.validate()
    assert data.N == 50
    assert data.counts.min() >= 6
    assert np.all(data.followup >= data.visit_time[data.last_row])
    assert 0.60 <= 1 - data.event.mean() <= 0.95
    assert truth.r.shape == (data.n,)
    # at least 30 subjects switch class somewhere along their visits
    assert sum(p != "none" for p in subject_jump_patterns(data, truth.r)) >= 30


def test_all_jump_behaviours_appear():
    data, truth = simulate_dataset(SimDesign(n_subjects=300, seed=0))
    assert set(subject_jump_patterns(data, truth.r)) == {"none", "single", "multiple"}


def test_jump_pattern():
    assert jump_pattern([0, 0, 0]) == "none"
    assert jump_pattern([0, 1, 1]) == "single"
    assert jump_pattern([0, 1, 0]) == "multiple"


def test_equal_memberships_are_even():
    c1 = ClassParams(xi=(0.3, 0.3), beta=(2.0, 0.5), tau=0.1, lambda0=0.2, w=0.5, delta=(-0.5, -0.8))
    c2 = ClassParams(xi=(0.3, 0.3), beta=(4.0, 3.0), tau=0.5, lambda0=0.1, w=0.8, delta=(-1.5, -0.4))
    data, truth = simulate_dataset(SimDesign(n_subjects=700, classes=(c1, c2), seed=1))
    assert data.n >= 10_000
    assert abs(truth.r.mean() - 0.5) < 0.01


def test_truth_matches_design():
    data, truth = simulate_dataset(SimDesign(seed=0))
    np.testing.assert_array_equal(truth.beta, [[2.0, 0.5], [4.0, 3.0]])
    np.testing.assert_array_equal(truth.xi, [[0.01, 0.2], [0.0, 1.0]])
    np.testing.assert_array_equal(truth.sigma_u, np.eye(2))
    assert truth.u.shape == (data.N, 2)


def test_aids_like_table():
    df = simulate_aids_like(seed=0)
    assert df.patient.nunique() == 467
    assert 1200 <= len(df) <= 1600
    assert set(df.death.unique()) <= {0, 1}
    assert set(df.obstime.unique()) <= {0.0, 2.0, 6.0, 12.0, 18.0}
    assert (df.groupby("patient").obstime.max() <= df.groupby("patient").Time.first()).all()
