import numpy as np
import pytest

from tvjlcm.data import ModelSpec
from tvjlcm.errors import StateError
from tvjlcm.mcmc import Chain, MCMCConfig, initial_state, relabel_chain, run_chain
from tvjlcm.model import ParamState
from tvjlcm.simulation import SimDesign, simulate_dataset

from conftest import make_dataset
from oracles import label_frequency_error

SHORT = MCMCConfig(iterations=300, burn_in=100, seed=5, am_restarts=(50,))


@pytest.fixture(scope="module")
def sim():
    data, truth = simulate_dataset(SimDesign(n_subjects=30, seed=2))
    return data, truth


def test_same_seed_is_bit_identical(sim):
    data, _ = sim
    spec = ModelSpec.for_data(data, 2)
    a = run_chain(data, spec, config=SHORT)
    b = run_chain(data, spec, config=SHORT)
    for name in a.draws:
        np.testing.assert_array_equal(a.draws[name], b.draws[name])
    assert a.acceptance == b.acceptance


def test_different_seed_differs(sim):
    data, _ = sim
    spec = ModelSpec.for_data(data, 2)
    a = run_chain(data, spec, config=SHORT)
    b = run_chain(data, spec, config=MCMCConfig(iterations=300, burn_in=100, seed=6, am_restarts=(50,)))
    assert not np.array_equal(a.draws["beta"], b.draws["beta"])


def test_chain_shapes_and_support(sim):
    data, _ = sim
    spec = ModelSpec.for_data(data, 2)
    ch = run_chain(data, spec, config=SHORT)
    assert len(ch) == 300 and ch.n_post == 200
    assert ch.draws["u"].shape == (300, data.N, 2)
    assert ch.draws["r"].shape == (300, data.n)
    assert np.all(ch.draws["tau"] > 0) and np.all(ch.draws["lambda0"] > 0)
    assert np.all(ch.draws["xi"][:, -1] == 0)  # reference class
    assert set(ch.acceptance) >= {"theta", "u"}


def test_gibbs_tau_lambda_variant_runs(sim):
    data, _ = sim
    spec = ModelSpec.for_data(data, 2)
    cfg = MCMCConfig(iterations=120, burn_in=20, seed=1, gibbs_tau_lambda=True, am_restarts=())
    ch = run_chain(data, spec, config=cfg)
    assert np.all(np.isfinite(ch.draws["tau"])) and ch.meta["gibbs_tau_lambda"]


def test_single_class_mixed_model_recovers_beta():
    rng = np.random.default_rng(7)
    data = make_dataset(rng, n_subjects=60, visits=6)
    true_beta = np.array([1.5, -0.8])
    u = rng.standard_normal((data.N, 2)) * [0.8, 0.4]
    data.y = data.X2 @ true_beta + np.einsum("nq,nq->n", data.Z, u[data.subject]) + 0.3 * rng.standard_normal(data.n)
    spec = ModelSpec.for_data(data, 1)
    init = initial_state(data, spec)
    init.delta[:] = 0
    ch = run_chain(data, spec, init=init, config=MCMCConfig(iterations=1500, burn_in=500, seed=3, am_restarts=(100,)))
    post = ch.post("beta")[:, 0]
    assert np.all(np.abs(post.mean(axis=0) - true_beta) < 3 * post.std(axis=0))


def test_label_sampler_reproduces_enumeration():
    assert label_frequency_error(n_sweeps=20_000, seed=5) < 0.02


def test_acceptance_rates_reasonable(sim):
    data, _ = sim
    spec = ModelSpec.for_data(data, 2)
    ch = run_chain(data, spec, config=MCMCConfig(iterations=1200, burn_in=600, seed=2))
    rates = ch.acceptance_rates()
    assert 0.05 < rates["theta"] < 0.6
    assert 0.05 < rates["u"] < 0.6


def _toy_chain():
    M, K = 4, 2
    draws = {
        "xi": np.zeros((M, K, 2)),
        "beta": np.array([[[1.0, 5.0], [2.0, 1.0]]] * M),
        "omega": np.array([[[0.1], [0.2]]] * M),
        "delta": np.zeros((M, K, 2)),
        "tau": np.array([[0.1, 0.2]] * M),
        "lambda0": np.array([[[1.0], [2.0]]] * M),
        "sigma_u": np.array([np.eye(2)] * M),
        "u": np.zeros((M, 3, 2)),
        "r": np.array([[0, 1, 1]] * M),
    }
    draws["xi"][:, 0] = [0.5, -0.5]  # class 2 is the reference
    spec = ModelSpec(K=2, dim_x1=2, dim_x2=2, dim_x3=1, q=2)
    return Chain(spec, draws, 1, 0)


def test_relabel_orders_by_slope_and_moves_everything():
    ch = relabel_chain(_toy_chain(), 1)
    np.testing.assert_array_equal(ch.draws["beta"][0], [[2.0, 1.0], [1.0, 5.0]])
    np.testing.assert_array_equal(ch.draws["tau"][0], [0.2, 0.1])
    np.testing.assert_array_equal(ch.draws["r"][0], [1, 0, 0])
    # reference class keeps xi = 0 after the swap
    np.testing.assert_allclose(ch.draws["xi"][0], [[-0.5, 0.5], [0.0, 0.0]])


def test_posterior_mean_uses_post_burn_in():
    ch = _toy_chain()
    ch.draws["tau"][0] = [100.0, 100.0]
    np.testing.assert_allclose(ch.posterior_mean().tau, [0.1, 0.2])


def test_chain_rejects_bad_burn_in():
    ch = _toy_chain()
    with pytest.raises(StateError):
        Chain(ch.spec, ch.draws, 4, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        MCMCConfig(iterations=10, burn_in=10)


def test_initial_state_is_valid(sim):
    data, _ = sim
    for K in (1, 2, 3):
        spec = ModelSpec.for_data(data, K)
        state = initial_state(data, spec)
        assert isinstance(state, ParamState)
        state.validate(spec, data)
