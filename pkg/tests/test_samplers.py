import numpy as np
import pytest
from scipy import integrate, stats

from tvjlcm import mcmc
from tvjlcm.data import Dataset, ModelSpec
from tvjlcm.errors import StateError
from tvjlcm.model import ParamState, Priors, joint_log_likelihood

from conftest import make_dataset, make_state
from oracles import sampler_problem, slice_discrepancies


def test_conditionals_match_unnormalised_slices():
    spreads = slice_discrepancies(seed=7, n_grid=9)
    assert max(spreads.values()) < 1e-8, spreads


def test_beta_empty_class_is_prior(toy):
    data, spec, state, priors = toy
    state.r[:] = 0
    mean, cov = mcmc.beta_conditional(1, data, state, priors)
    np.testing.assert_array_equal(mean, priors.beta_mean)
    np.testing.assert_array_equal(cov, priors.beta_cov)


def _single_obs(y=1.234):
    data = Dataset(
        subject_ids=[1], subject=[0], visit_time=[0.0], y=[y], X1=[[1.0]], X2=[[1.0]], Z=[[0.0]],
        followup=[1.0], event=[0], X3=[[0.0]],
    )
    spec = ModelSpec.for_data(data, 1)
    state = ParamState(
        xi=[[0.0]], beta=[[0.0]], omega=[[0.0]], delta=[[0.0]], tau=[1.0], lambda0=[[1.0]],
        sigma_u=[[1.0]], u=[[0.0]], r=[0],
    )
    return data, spec, state


def test_beta_vague_prior_recovers_observation():
    data, spec, state = _single_obs()
    priors = Priors.default(spec, beta_cov=[[1e6]], sigma_scale=[[1.0]])
    mean, _ = mcmc.beta_conditional(0, data, state, priors)
    assert mean[0] == pytest.approx(1.234, abs=1e-3)


def test_lambda_exponential_conjugacy():
    rng = np.random.default_rng(1)
    T = rng.uniform(0.2, 2.0, 12)
    d = (rng.random(12) < 0.6).astype(int)
    data = Dataset(
        subject_ids=list(range(12)), subject=np.arange(12), visit_time=np.zeros(12), y=np.zeros(12),
        X1=np.ones((12, 1)), X2=np.ones((12, 1)), Z=np.column_stack([np.ones(12), np.zeros(12)]),
        followup=T, event=d, X3=np.zeros((12, 1)),
    )
    spec = ModelSpec.for_data(data, 1)
    state = ParamState(
        xi=[[0.0]], beta=[[0.0]], omega=[[0.0]], delta=[[0.0, 0.0]], tau=[1.0], lambda0=[[1.0]],
        sigma_u=np.eye(2), u=np.zeros((12, 2)), r=np.zeros(12),
    )
    priors = Priors.default(spec)
    shape, rate = mcmc.lambda_conditional(0, 0, data, state, spec, priors)
    assert shape == pytest.approx(priors.lambda_shape + d.sum())
    assert rate == pytest.approx(priors.lambda_rate + T.sum())


def test_lambda_mean_matches_grid_integration():
    data, spec, state, priors = sampler_problem()
    shape, rate = mcmc.lambda_conditional(0, 1, data, state, spec, priors)

    def unnorm(x):
        s = state.copy()
        s.lambda0[0, 1] = x
        return joint_log_likelihood(data, s, spec) + stats.gamma.logpdf(x, priors.lambda_shape, scale=1 / priors.lambda_rate)

    ref = unnorm(shape / rate)
    grid = np.linspace(1e-6, 12 * shape / rate, 4001)
    dens = np.exp([unnorm(x) - ref for x in grid])
    mean = integrate.simpson(grid * dens, x=grid) / integrate.simpson(dens, x=grid)
    assert mean == pytest.approx(shape / rate, abs=1e-3)


def test_lambda_empty_class_is_prior(toy):
    data, spec, state, priors = toy
    state.r[:] = 1
    assert mcmc.lambda_conditional(0, 0, data, state, spec, priors) == (priors.lambda_shape, priors.lambda_rate)


def test_sigma_u_without_subjects_is_prior(toy):
    _, spec, state, priors = toy
    state.u = np.zeros((0, spec.q))
    df, scale = mcmc.sigma_u_conditional(state, priors)
    assert df == priors.sigma_df
    np.testing.assert_array_equal(scale, priors.sigma_scale)


def test_sigma_u_scalar_is_inverse_gamma():
    rng = np.random.default_rng(3)
    u = rng.standard_normal((30, 1))
    priors = Priors(beta_mean=[0.0], beta_cov=[[1.0]], sigma_df=3.0, sigma_scale=[[2.0]])
    state = ParamState(
        xi=[[0.0]], beta=[[0.0]], omega=[[0.0]], delta=[[0.0]], tau=[1.0], lambda0=[[1.0]],
        sigma_u=[[1.0]], u=u, r=[],
    )
    draws = np.array([mcmc.sample_sigma_u(state, priors, rng)[0, 0] for _ in range(20_000)])
    shape, scale = (3.0 + 30) / 2, (2.0 + u[:, 0] @ u[:, 0]) / 2
    mean, sd = scale / (shape - 1), scale / (shape - 1) / np.sqrt(shape - 2)
    assert abs(draws.mean() - mean) < 3 * sd / np.sqrt(draws.size)


def test_sigma_u_draws_are_positive_definite(toy):
    _, _, state, priors = toy
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = mcmc.sample_sigma_u(state, priors, rng)
        np.testing.assert_array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() > 0


def test_tau_constant_residuals():
    data, spec, state = _single_obs(y=0.0)
    data = data.subset([0, 0, 0])
    state.u = np.zeros((3, 1))
    state.r = np.zeros(3, dtype=int)
    state.beta = np.array([[-0.7]])
    priors = Priors.default(spec, sigma_scale=[[1.0]])
    shape, rate = mcmc.tau_conditional(0, data, state, priors)
    assert rate == pytest.approx(3 * 0.7**2 / 2 + priors.tau_rate)
    assert shape == pytest.approx(priors.tau_shape + 1.5)


def test_tau_empty_class_is_prior(toy):
    data, spec, state, priors = toy
    state.r[:] = 0
    assert mcmc.tau_conditional(1, data, state, priors) == (priors.tau_shape, priors.tau_rate)


# labels ---------------------------------------------------------------------


def test_single_class_labels():
    rng = np.random.default_rng(0)
    data = make_dataset(rng)
    spec = ModelSpec.for_data(data, 1)
    state = make_state(rng, data, spec)
    assert np.all(mcmc.sample_labels(data, state, spec, rng) == 0)


def test_symmetric_classes_give_uniform_labels():
    rng = np.random.default_rng(0)
    data = make_dataset(rng, n_subjects=40, visits=6)
    spec = ModelSpec.for_data(data, 3, reference_class_constraint=False)
    state = make_state(rng, data, spec)
    for name in ("xi", "beta", "omega", "delta", "tau", "lambda0"):
        arr = getattr(state, name)
        arr[:] = arr[0]
    draws = np.concatenate([mcmc.sample_labels(data, state, spec, rng) for _ in range(10_000 // data.n + 1)])
    counts = np.bincount(draws, minlength=3)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_well_separated_labels():
    rng = np.random.default_rng(0)
    data = make_dataset(rng, n_subjects=1, visits=1)
    data.y[:] = 10.0
    data.X2[:] = [1.0, 0.0]
    spec = ModelSpec.for_data(data, 2)
    state = make_state(rng, data, spec)
    state.beta = np.array([[-10.0, 0.0], [10.0, 0.0]])
    state.u[:] = 0
    state.tau[:] = 0.1
    hits = sum(mcmc.sample_labels(data, state, spec, rng)[0] == 1 for _ in range(5000))
    assert hits / 5000 > 0.999


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_labels_fail_when_all_classes_vanish(toy):
    data, spec, state, _ = toy
    state.tau[:] = 1e-300
    state.beta[:] = 1e200
    with pytest.raises(StateError):
        mcmc.sample_labels(data, state, spec, np.random.default_rng(0))


def test_subject_level_labels_constant_within_subject(toy):
    data, _, state, _ = toy
    spec = ModelSpec.for_data(data, 2, subject_level_labels=True)
    r = mcmc.sample_labels(data, state, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(r, r[data.first_row][data.subject])


# collapsed beta/U block -----------------------------------------------------


def test_joint_beta_u_density_matches_slices(rng):
    data = make_dataset(rng, n_subjects=5, visits=4)
    spec = ModelSpec.for_data(data, 2)
    state = make_state(rng, data, spec)
    priors = Priors.default(spec)
    mean, cov, C_inv, ZtWX, ZtWy = mcmc.beta_u_conditional(data, state, priors)
    beta_prior = stats.multivariate_normal(priors.beta_mean, priors.beta_cov)
    beta_post = stats.multivariate_normal(mean, cov)

    def normed(beta, u):
        u_mean = np.einsum("nij,nj->ni", C_inv, ZtWy - ZtWX @ beta.ravel())
        return beta_post.logpdf(beta.ravel()) + sum(
            stats.multivariate_normal(u_mean[i], C_inv[i]).logpdf(u[i]) for i in range(data.N)
        )

    def unnorm(beta, u):
        s = state.copy()
        s.beta, s.u = beta, u
        return joint_log_likelihood(data, s, spec, survival=False) + sum(beta_prior.logpdf(b) for b in beta)

    for target in ("beta", "u"):
        diffs = []
        for x in np.linspace(-1.5, 1.5, 7):
            beta, u = state.beta.copy(), state.u.copy()
            if target == "beta":
                beta[1, 0] += x
            else:
                u[2, 1] += x
            diffs.append(unnorm(beta, u) - normed(beta, u))
        assert np.ptp(diffs) < 1e-8


def test_beta_u_move_without_association_always_accepts(toy):
    data, spec, state, priors = toy
    state.delta[:] = 0
    rng = np.random.default_rng(0)
    assert all(mcmc.sample_beta_u(data, state, spec, priors, rng)[2] for _ in range(20))
