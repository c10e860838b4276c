import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import invwishart

from climfuse.covariance import Grid
from climfuse.diagnostics import geweke_priors
from climfuse.model import EnsembleDataset, HyperParams, LatentState, PriorConfig, log_joint_density
from climfuse.oracles import oracle_instance
from climfuse.sampler import (
    ChainConfig,
    ChainState,
    MHTuner,
    SamplerError,
    STORED_FIELDS,
    conditional_beta,
    conditional_phi_actual,
    conditional_phi_scale,
    conditional_tau_w,
    conditional_y_ha,
    initialize_state,
    iterate_chain,
    mh_parameter_names,
    run_chain,
    sweep,
    update_v,
    v_conditional_parameters,
)
from climfuse.simulate import desk_design, generate


def _two_site_state(obs, y_h, y_ha, **param_changes):
    grid = Grid(np.array([[0.0, 0.0], [1.0, 0.0]]))
    runs = [np.zeros((1, 2))]
    data = EnsembleDataset(grid, runs, runs, np.atleast_2d(obs))
    latent = LatentState(
        mu_h=np.zeros(2), mu_f=np.zeros(2), x_h=np.zeros((2, 1)), x_f=np.zeros((2, 1)),
        y_h=np.asarray(y_h, float), y_f=np.zeros(2), y_ha=np.asarray(y_ha, float), y_fa=np.zeros(2),
    )
    values = dict(
        beta=1.0, tau_h=1.0, tau_f=1.0, gamma_h=0.5, gamma_f=0.5, v=[[1.0]], phi_hm=[1.0], phi_fm=[1.0],
        gamma_hm=[0.5], gamma_fm=[0.5], nu_h=2.0, nu_f=2.0, phi_h=1.0, phi_f=1.0, phi_ha=1.0, phi_fa=1.0,
        tau_w=1.0,
    )
    values.update(param_changes)
    return ChainState(data, latent, HyperParams(**values), "full", PriorConfig())


def test_actual_climate_conditional_by_hand():
    # y_ha | y_h = 1, obs = 2, phi_ha = tau_w = 1: precision 2, mean 1.5
    cs = _two_site_state(obs=[2.0, 2.0], y_h=[1.0, 1.0], y_ha=[0.0, 0.0])
    prec, lin = conditional_y_ha(cs)
    assert prec == 2.0
    assert np.allclose(lin / prec, 1.5)


def test_actual_precision_conditional_by_hand():
    # n = 2, zero residual, nu = 2, phi_H = 1, kappa = 1: Gamma(2, 1)
    cs = _two_site_state(obs=[0.0, 0.0], y_h=[0.3, 0.3], y_ha=[0.3, 0.3])
    assert conditional_phi_actual(cs, "h") == (2.0, 1.0)


def test_observation_precision_conditional_by_hand():
    cs = _two_site_state(obs=[0.5, -0.5], y_h=[0.0, 0.0], y_ha=[0.5, -0.5])
    shape, rate = conditional_tau_w(cs)
    assert shape == pytest.approx(1 + 1e-3)
    assert rate == pytest.approx(1e-3)
    cs.mutations = ("tau_w_rate_half",)
    assert conditional_tau_w(cs)[1] == pytest.approx(5e-4)


def test_scale_conditional_by_hand():
    # IG(a + nu M/2 + nu/2, b + nu/2 (phi_1 + phi_a)) with a = b = 1e-3, nu = 2, M = 1
    cs = _two_site_state(obs=[0.0, 0.0], y_h=[0.0, 0.0], y_ha=[0.0, 0.0], phi_hm=[3.0], phi_ha=0.5)
    shape, scale = conditional_phi_scale(cs, "h")
    assert shape == pytest.approx(2.001)
    assert scale == pytest.approx(1e-3 + 3.0 + 0.5)


def test_beta_conditional_matches_log_joint(small_state):
    cs = small_state
    q, v = conditional_beta(cs)

    def f(b):
        p = cs.params.copy()
        p.beta = b
        return log_joint_density(cs.data, cs.latent, p, cs.variant, cs.priors)

    h = 0.1
    assert -(f(h) - 2 * f(0.0) + f(-h)) / h**2 == pytest.approx(q, rel=1e-6)
    assert (f(h) - f(-h)) / (2 * h) == pytest.approx(v, rel=1e-6)


def _desk_data(seed=0):
    return generate(desk_design(seed=seed))[0]


def test_stored_draw_count_and_fields():
    data = _desk_data()
    chain = run_chain(data, ChainConfig(iterations=30, burn_in=10, thin=2, seed=1))
    assert chain.n_draws == 10
    assert set(chain.draws) == set(STORED_FIELDS)
    assert chain["v"].shape == (10, 6, 6)
    assert chain["y_f"].shape == (10, 64)


def test_chain_is_bit_identical_for_a_seed():
    data = _desk_data()
    cfg = ChainConfig(iterations=25, burn_in=5, seed=7)
    a, b = run_chain(data, cfg), run_chain(data, cfg)
    for name in STORED_FIELDS:
        assert np.array_equal(a[name], b[name]), name
    c = run_chain(data, ChainConfig(iterations=25, burn_in=5, seed=8))
    assert not np.array_equal(a["beta"], c["beta"])


def test_thinning_matches_outer_loop():
    data = _desk_data(1)
    thinned = run_chain(data, ChainConfig(iterations=24, burn_in=4, thin=2, seed=3))
    manual = [cs.latent.y_f.copy() for t, cs, _ in iterate_chain(data, ChainConfig(iterations=24, burn_in=4, seed=3))
              if t > 4 and (t - 4) % 2 == 0]
    assert np.array_equal(thinned["y_f"], np.array(manual))


def test_chain_invariants_hold_every_draw():
    data = _desk_data(2)
    chain = run_chain(data, ChainConfig(iterations=40, burn_in=10, seed=4))
    assert np.all(chain["v"][:, 0, 0] == 1.0)
    assert np.all(chain["tau_h"] > 0) and np.all(chain["tau_f"] > 0)
    assert np.all(np.linalg.eigvalsh(chain["v"]) > 0)


def test_rescale_update_preserves_scaled_draw(small_state):
    cs = small_state
    cs.v_update = "rescale"
    psi, df = v_conditional_parameters(cs)
    tau_h, tau_f = cs.params.tau_h, cs.params.tau_f
    raw = invwishart.rvs(df=df, scale=psi, random_state=np.random.default_rng(9))
    update_v(cs, np.random.default_rng(9))
    assert cs.params.v[0, 0] == 1.0
    assert np.allclose(cs.params.v / cs.params.tau_h, raw / tau_h)
    assert np.allclose(cs.params.v / cs.params.tau_f, raw / tau_f)


def test_non_dependence_variants_keep_identity_v():
    data = _desk_data(3)
    chain = run_chain(data, ChainConfig(iterations=10, burn_in=2, seed=1, variant="no-v"))
    assert np.all(chain["v"] == np.eye(6))
    chain = run_chain(data, ChainConfig(iterations=10, burn_in=2, seed=1, variant="simplest"))
    assert np.all(chain["gamma_h"] == chain["gamma_h"][0])
    assert set(chain.acceptance) == {"nu_h", "nu_f"}


def test_mh_names_follow_variant():
    assert mh_parameter_names("full", 2) == [
        "gamma_h", "gamma_f", "gamma_hm[1]", "gamma_hm[2]", "gamma_fm[1]", "gamma_fm[2]", "nu_h", "nu_f"
    ]
    assert mh_parameter_names("simplest", 2) == ["nu_h", "nu_f"]


def test_tuner_adapts_then_freezes():
    tuner = MHTuner(["a"], 0.5, window=2)
    for t in (1, 2):
        tuner.record("a", True)
        tuner.end_iteration(t)
    assert tuner.step["a"] == pytest.approx(0.5 * np.exp(0.56))
    tuner.freeze()
    tuner.record("a", False)
    tuner.end_iteration(4)
    assert tuner.step["a"] == pytest.approx(0.5 * np.exp(0.56))
    assert tuner.rates() == {"a": 0.0}


def test_tuner_step_is_clamped():
    tuner = MHTuner(["a"], 9.9, window=1)
    for t in range(1, 20):
        tuner.record("a", True)
        tuner.end_iteration(t)
    assert tuner.step["a"] == 10.0


def test_sweep_failure_names_iteration(small_state):
    cs = small_state
    cs.set_v(np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    tuner = MHTuner(mh_parameter_names(cs.variant, cs.M))
    with pytest.raises(SamplerError, match="iteration 7"):
        sweep(cs, np.random.default_rng(0), tuner, 7)


def test_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, thin=0)
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, chi_scheme="other")
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, mh_initial_step={"nu_h": -1.0})
    assert ChainConfig(iterations=10, burn_in=4, thin=3).n_stored == 2


def test_initialization_of_constant_runs():
    grid = Grid.regular(2)
    runs = [np.full((2, 4), 3.0), np.full((1, 4), 3.0)]
    data = EnsembleDataset(grid, runs, runs, np.full((2, 4), 3.0))
    latent, params = initialize_state(data)
    for name in ("mu_h", "mu_f", "y_h", "y_f", "y_ha", "y_fa"):
        assert np.all(getattr(latent, name) == 3.0)
    assert np.all(latent.x_h == 3.0)
    assert np.all(params.phi_hm == 1e6) and params.tau_w == 1e6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
def test_initialization_is_in_support(seed, M, N):
    rng = np.random.default_rng(seed)
    grid = Grid.regular(2)
    runs_h = [rng.normal(size=(rng.integers(1, 4), 4)) * rng.uniform(0.1, 10) for _ in range(M)]
    runs_f = [rng.normal(size=(rng.integers(1, 4), 4)) for _ in range(M)]
    data = EnsembleDataset(grid, runs_h, runs_f, rng.normal(size=(N, 4)))
    latent, params = initialize_state(data)
    assert params.support_violations() == []
    latent.check(4, M)


def test_single_model_chain_runs():
    grid = Grid.regular(2)
    rng = np.random.default_rng(1)
    data = EnsembleDataset(grid, [rng.normal(size=(2, 4))], [rng.normal(size=(2, 4))], rng.normal(size=(1, 4)))
    chain = run_chain(data, ChainConfig(iterations=20, burn_in=5, seed=2), geweke_priors())
    assert np.all(chain["v"] == 1.0)
    assert np.all(np.isfinite(chain["y_f"]))


def test_sequential_scheme_runs(small_state):
    state = oracle_instance(4)
    cfg = ChainConfig(iterations=10, burn_in=2, seed=1, chi_scheme="sequential")
    chain = run_chain(state.data, cfg, geweke_priors())
    assert chain.n_draws == 8
