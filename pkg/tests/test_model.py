from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.stats import multivariate_normal

from climfuse.covariance import Grid
from climfuse.model import (
    EnsembleDataset,
    ModelVariant,
    PriorConfig,
    SpatialTerm,
    chi_layer_log_density,
    draw_constrained_v,
    log_joint_density,
    partition_coefficients,
)
from climfuse.diagnostics import geweke_priors
from climfuse.oracles import oracle_instance


def _lj(cs, **changes):
    params = cs.params.copy()
    for k, v in changes.items():
        setattr(params, k, v)
    return log_joint_density(cs.data, cs.latent, params, cs.variant, cs.priors)


@pytest.mark.parametrize(
    "text,expected",
    [("full", "full"), ("no-v", "no-v"), ("NoModelDependence", "no-v"), ("nospatialmeans", "no-spatial"),
     ("Simplest", "simplest")],
)
def test_variant_parse(text, expected):
    assert ModelVariant.parse(text).value == expected


def test_variant_flags():
    assert ModelVariant.FULL.spatial and ModelVariant.FULL.model_dependence
    assert not ModelVariant.SIMPLEST.spatial and not ModelVariant.SIMPLEST.model_dependence
    assert ModelVariant.NO_MODEL_DEPENDENCE.spatial and not ModelVariant.NO_MODEL_DEPENDENCE.model_dependence
    assert not ModelVariant.NO_SPATIAL_MEANS.spatial and ModelVariant.NO_SPATIAL_MEANS.model_dependence
    with pytest.raises(ValueError):
        ModelVariant.parse("mixed")


def test_dataset_validation():
    grid = Grid.regular(2)
    ok = [np.zeros((2, 4))]
    with pytest.raises(ValueError):
        EnsembleDataset(grid, ok, ok + ok, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        EnsembleDataset(grid, [np.zeros((2, 3))], ok, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        EnsembleDataset(grid, ok, ok, np.full((1, 4), np.nan))
    data = EnsembleDataset(grid, ok, [np.zeros((3, 4))], np.zeros((2, 4)))
    assert (data.n, data.M, data.N) == (4, 1, 2)
    assert data.run_counts_f.tolist() == [3]
    assert data.model_names == ["model1"]


def test_prior_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(tau_prior=(0.0, 1.0))
    with pytest.raises(ValueError):
        PriorConfig(v_df_extra=0)
    with pytest.raises(ValueError):
        PriorConfig(v_tilde=np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert np.array_equal(PriorConfig().v_prior_mean(3), np.eye(3))


def test_chi_layer_matches_kronecker_normal(rng):
    grid = Grid.regular(2)
    sigma = SpatialTerm.whittle(grid, 0.4)
    v = np.array([[1.0, 0.3, -0.2], [0.3, 2.0, 0.5], [-0.2, 0.5, 1.5]])
    tau = 1.7
    dev = rng.standard_normal((4, 3))
    cov = np.kron(v, sigma.matrix) / tau
    ref = multivariate_normal(np.zeros(12), cov).logpdf(dev.T.ravel()) + 6 * np.log(2 * np.pi)
    assert chi_layer_log_density(dev, v, sigma, tau) == pytest.approx(ref, rel=1e-10)


def test_outside_support_is_minus_infinity(small_state):
    assert _lj(small_state, gamma_h=1e6 + 1.0) == -np.inf
    assert _lj(small_state, tau_w=-1.0) == -np.inf
    bad_v = small_state.params.v.copy()
    bad_v[0, 0] = 2.0
    assert _lj(small_state, v=bad_v) == -np.inf
    assert np.isfinite(_lj(small_state))


def test_range_upper_boundary_is_inside_support():
    cs = oracle_instance(1, priors=replace(geweke_priors(), range_upper=1e6))
    assert np.isfinite(_lj(cs, gamma_h=1e6))


def test_site_permutation_invariance(small_state):
    cs = small_state
    order = np.array([2, 0, 3, 1])
    base = log_joint_density(cs.data, cs.latent, cs.params, cs.variant, cs.priors)
    perm = log_joint_density(cs.data.permuted(order), cs.latent.permuted(order), cs.params, cs.variant, cs.priors)
    assert perm == pytest.approx(base, rel=1e-10)


def test_beta_enters_quadratically(small_state):
    betas = np.array([-1.0, 0.0, 1.0, 2.5])
    values = np.array([_lj(small_state, beta=b) for b in betas])
    coeffs = np.polyfit(betas, values, 2)
    assert np.allclose(np.polyval(coeffs, betas), values, rtol=1e-10, atol=1e-8)
    assert coeffs[0] < 0


def test_full_with_identity_v_differs_from_no_v_by_prior_constant():
    cs = oracle_instance(2)
    cs.params.v = np.eye(3)
    full = log_joint_density(cs.data, cs.latent, cs.params, ModelVariant.FULL, cs.priors)
    no_v = log_joint_density(cs.data, cs.latent, cs.params, ModelVariant.NO_MODEL_DEPENDENCE, cs.priors)
    d = cs.priors.v_df_extra
    assert full - no_v == pytest.approx(-0.5 * d * 3, rel=1e-12)


def test_non_spatial_variant_ignores_ranges():
    cs = oracle_instance(3, variant="simplest")
    assert _lj(cs, gamma_h=0.1, gamma_fm=np.full(3, 0.9)) == pytest.approx(_lj(cs))


def test_partition_coefficients_empty_and_full():
    v = np.array([[1.0, 0.5, 0.2], [0.5, 2.0, 0.1], [0.2, 0.1, 1.0]])
    a, s = partition_coefficients(v, 0, [])
    assert a.size == 0 and s == 1.0
    a, s = partition_coefficients(v, 2, [0, 1])
    p = np.linalg.inv(v)
    assert s == pytest.approx(1 / p[2, 2])
    assert np.allclose(a, -p[2, :2] / p[2, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_constrained_v_draw_is_valid(M, seed):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((M, M))
    psi = b @ b.T + M * np.eye(M)
    v = draw_constrained_v(psi, M + 3, rng)
    assert v[0, 0] == 1.0
    assert np.array_equal(v, v.T)
    assert np.linalg.eigvalsh(v).min() > 0


def test_constrained_v_matches_grid_oracle():
    # 2 x 2 case: V = [[1, b], [b, s + b^2]]; the map (b, s) -> V has unit Jacobian,
    # so the conditional density of (b, s) is the inverse-Wishart kernel at V
    psi = np.array([[2.0, 0.8], [0.8, 1.5]])
    df = 6.0
    b_grid = np.linspace(-3, 4, 701)
    s_grid = np.linspace(1e-3, 6, 900)
    bb, ss = np.meshgrid(b_grid, s_grid, indexing="ij")
    v11, v12, v22 = 1.0, bb, ss + bb**2
    det = v11 * v22 - v12**2
    tr = (psi[0, 0] * v22 - 2 * psi[0, 1] * v12 + psi[1, 1] * v11) / det
    logk = -(df + 3) / 2 * np.log(det) - 0.5 * tr
    w = np.exp(logk - logk.max())
    pb = w.sum(axis=1)
    cdf = np.cumsum(pb) / pb.sum()
    rng = np.random.default_rng(7)
    draws = np.array([draw_constrained_v(psi, df, rng)[0, 1] for _ in range(10000)])
    ks = stats.kstest(draws, lambda x: np.interp(x, b_grid, cdf)).statistic
    assert ks < 0.02


def test_single_model_v_is_one(rng):
    assert draw_constrained_v(np.array([[3.0]]), 4, rng).tolist() == [[1.0]]


def test_support_violations_lists_names(small_state):
    p = small_state.params.copy()
    p.phi_h = 0.0
    p.gamma_fm = np.array([0.1, -1.0, 0.2])
    assert set(p.support_violations()) == {"phi_h", "gamma_fm"}
    with pytest.raises(ValueError, match="phi_h"):
        p.check()
