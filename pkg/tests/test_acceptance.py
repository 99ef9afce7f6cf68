"""End-to-end acceptance checks, one test per criterion.

Criteria 1, 2, 8 and 9 run full-length fits and take about an hour in
total on one core; deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest

from tvjlcm import io
from tvjlcm.am import AmState
from tvjlcm.experiments import ReplicateCache, auc_study, evaluable_seeds, recovery_study, selection_study
from tvjlcm.inference import auc_ipcw, predictive_survival, summarize
from tvjlcm.mcmc import MCMCConfig
from tvjlcm.simulation import simulate_aids_like
from tvjlcm.workflow import TIME_VARYING, fit_model

from oracles import (
    am_gaussian_errors,
    cumulative_hazard_errors,
    inversion_checks,
    label_frequency_error,
    moment_checks,
    slice_discrepancies,
)

REPLICATES = list(range(10))
T_PRED, DT_PRED = 0.5, 0.3


@pytest.fixture(scope="session")
def cache():
    return ReplicateCache(config=MCMCConfig(iterations=5000, burn_in=2000))


@pytest.mark.slow
def test_criterion_1_parameter_recovery(cache, acceptance_report):
    rec = recovery_study(cache, REPLICATES)
    counts = rec.coverage_counts
    beta_bias = np.abs(rec.bias[rec.field_mask("beta")])
    worst = rec.names[int(np.argmin(counts))]
    passed = len(rec.names) == 18 and counts.min() >= 7 and beta_bias.max() <= 0.2
    acceptance_report(
        1,
        passed,
        f"min coverage {counts.min()}/10 ({worst}), max |beta bias| {beta_bias.max():.3f}",
    )
    assert len(rec.names) == 18
    low = {n: int(c) for n, c in zip(rec.names, counts) if c < 7}
    assert not low, f"89% intervals cover the truth in fewer than 7/10 replicates: {low}"
    assert beta_bias.max() <= 0.2


@pytest.mark.slow
def test_criterion_2_model_selection(cache, acceptance_report):
    outcomes = selection_study(cache, REPLICATES)
    by_error = sum(o.winner("error_rate") == (TIME_VARYING, 2) for o in outcomes)
    by_dic = sum(o.winner("dic") == (TIME_VARYING, 2) for o in outcomes)
    # reported for diagnosis only; the pass condition uses the default variant
    marginal = selection_study(cache, REPLICATES, dic_variant="marginal")
    by_marginal = sum(o.winner("dic") == (TIME_VARYING, 2) for o in marginal)
    dic_winners = sorted({f"{v} K={k}" for v, k in (o.winner("dic") for o in outcomes)})
    acceptance_report(
        2,
        by_error == 10 and by_dic >= 7,
        f"error rate {by_error}/10, conditional DIC {by_dic}/10 (winners {dic_winners}), "
        f"marginal DIC {by_marginal}/10",
    )
    assert by_error == 10
    assert by_dic >= 7


def test_criterion_3_conditional_samplers(acceptance_report):
    spreads = slice_discrepancies(n_grid=25)
    checks = moment_checks(n_draws=100_000)
    worst_slice = max(spreads.values())
    worst_z = max(float(c.z_scores.max()) for c in checks)
    acceptance_report(3, worst_slice < 1e-8 and worst_z < 3, f"slice spread {worst_slice:.1e}, max z {worst_z:.2f}")
    assert worst_slice < 1e-8, spreads
    assert worst_z < 3, {c.name: c.z_scores.round(2).tolist() for c in checks}


def test_criterion_4_cumulative_hazard(acceptance_report):
    errs = cumulative_hazard_errors(n=1000)
    acceptance_report(4, errs.max() < 1e-8, f"max relative error {errs.max():.1e}")
    assert errs.max() < 1e-8


def test_criterion_5_survival_inversion(acceptance_report):
    identity, sup = inversion_checks(n=100_000)
    acceptance_report(5, identity < 1e-8 and sup < 0.01, f"identity {identity:.1e}, KM sup-distance {sup:.4f}")
    assert identity < 1e-8
    assert sup < 0.01


def test_criterion_6_label_posterior(acceptance_report):
    err = label_frequency_error(n_sweeps=40_000)
    acceptance_report(6, err < 0.02, f"max frequency error {err:.4f}")
    assert err < 0.02


def test_criterion_7_adaptive_metropolis(acceptance_report):
    am = AmState(dim=2)
    am.update(np.zeros(2))
    seed_ok = np.array_equal(am.proposal_covariance()[0], (0.1**2 / 2) * np.eye(2))
    mean_err, cov_err, _ = am_gaussian_errors(n_post=50_000)
    passed = seed_ok and mean_err < 0.05 and cov_err < 0.10
    acceptance_report(7, passed, f"mean error {mean_err:.3f}, covariance error {cov_err:.3f}")
    assert seed_ok
    assert mean_err < 0.05
    assert cov_err < 0.10


def _brute_auc(risk, T, t, dt):
    cases = [i for i in range(len(T)) if t <= T[i] < t + dt]
    controls = [j for j in range(len(T)) if T[j] >= t + dt]
    return sum(risk[i] > risk[j] for i in cases for j in controls) / (len(cases) * len(controls))


@pytest.mark.slow
def test_criterion_8_prediction_and_auc(cache, acceptance_report):
    rng = np.random.default_rng(0)
    T = rng.exponential(1.0, 200)
    risk = -T + rng.normal(0, 0.5, 200)
    exact = auc_ipcw(risk, T, np.ones(200), T_PRED, DT_PRED) == _brute_auc(risk, T, T_PRED, DT_PRED)
    T_sep = np.array([0.55, 0.6, 0.7, 0.79, 0.9, 1.5, 2.0])
    separated = auc_ipcw(-T_sep, T_sep, np.ones(7), T_PRED, DT_PRED) == 1.0

    fit = cache.fit(0, TIME_VARYING, 2)
    state = fit.chain.posterior_mean()
    flat = all(np.all(predictive_survival(fit.data, state, fit.spec, t, 0.0) == 1.0) for t in (0.0, 0.5, 1.0))

    seeds = evaluable_seeds(cache, 10, T_PRED, DT_PRED)
    comps = auc_study(cache, seeds, T_PRED, DT_PRED)
    wins = sum(c.time_varying >= c.basic for c in comps)
    passed = exact and separated and flat and wins >= 7
    acceptance_report(
        8,
        passed,
        f"dt=0 exact {flat}, brute-force match {exact}, separation {separated}, "
        f"time-varying >= basic in {wins}/10 (seeds {seeds})",
    )
    assert flat and exact and separated
    assert wins >= 7, [(c.seed, round(c.time_varying, 3), round(c.basic, 3)) for c in comps]


@pytest.mark.slow
def test_criterion_9_aids_scale_smoke(tmp_path, acceptance_report):
    path = tmp_path / "aids_like.csv"
    simulate_aids_like(seed=0).to_csv(path, index=False)
    data = io.load_dataset(path, "aids")
    start = time.perf_counter()
    fit = fit_model(data, 2, TIME_VARYING, config=MCMCConfig(iterations=5000, burn_in=2000, seed=1))
    minutes = (time.perf_counter() - start) / 60
    summary = summarize(fit.chain)
    valid = (
        np.all(np.isfinite(summary.mean))
        and np.all(summary.sd >= 0)
        and np.all(summary.lower <= summary.mean)
        and np.all(summary.mean <= summary.upper)
    )
    passed = data.N == 467 and valid and minutes < 30
    acceptance_report(9, passed, f"N={data.N}, rows={data.n}, fit {minutes:.1f} min, summaries valid {bool(valid)}")
    assert data.N == 467 and 1200 <= data.n <= 1600
    assert valid
    assert minutes < 30
