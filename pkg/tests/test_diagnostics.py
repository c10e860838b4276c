import numpy as np
import pytest

from climfuse.diagnostics import (
    geweke_priors,
    DEFAULT_MONITORS,
    DegenerateSeriesWarning,
    GewekeDesign,
    UnknownParameter,
    effective_sample_size,
    export_trace,
    geweke_test,
)
from climfuse.sampler import ChainOutput
from climfuse.summarize import TooFewDraws


def test_ess_of_iid_is_close_to_n():
    x = np.random.default_rng(0).normal(size=4000)
    assert 3200 < effective_sample_size(x) <= 4000


def test_ess_of_ar1_matches_theory():
    # AR(1) with rho: ESS / n -> (1 - rho) / (1 + rho)
    rng = np.random.default_rng(1)
    rho, n = 0.8, 50_000
    x = np.empty(n)
    x[0] = 0.0
    e = rng.normal(size=n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    assert effective_sample_size(x) / n == pytest.approx((1 - rho) / (1 + rho), rel=0.15)


def test_ess_constant_series_warns():
    with pytest.warns(DegenerateSeriesWarning):
        assert effective_sample_size(np.ones(20)) == 20.0


def test_ess_errors():
    with pytest.raises(TooFewDraws):
        effective_sample_size(np.arange(5.0))
    with pytest.raises(ValueError):
        effective_sample_size(np.array([np.nan] * 20))


def _chain():
    draws = {"beta": np.arange(3.0), "phi_hm": np.arange(6.0).reshape(3, 2), "v": np.arange(12.0).reshape(3, 2, 2)}
    return ChainOutput(draws, {}, {}, 0, ["a", "b"], np.zeros((1, 2)))


def test_export_trace_names(tmp_path):
    chain = _chain()
    assert export_trace(chain, "beta").tolist() == [0.0, 1.0, 2.0]
    assert export_trace(chain, "phi_hm[2]").tolist() == [1.0, 3.0, 5.0]
    assert export_trace(chain, "v[1,2]").tolist() == [1.0, 5.0, 9.0]
    out = tmp_path / "t.csv"
    export_trace(chain, "beta", out)
    assert out.read_text() == "draw,value\n1,0.0\n2,1.0\n3,2.0\n"


@pytest.mark.parametrize("name", ["alpha", "phi_hm", "phi_hm[3]", "v[1]", "phi_hm[0]"])
def test_export_trace_unknown(name):
    with pytest.raises(UnknownParameter):
        export_trace(_chain(), name)


def test_geweke_without_sweeps_is_exactly_zero():
    report = geweke_test(GewekeDesign(), sweeps=0, rounds=50, seed=2)
    assert np.all(report.z == 0.0)
    assert report.ok()


def test_geweke_monitor_count():
    assert len(DEFAULT_MONITORS) >= 12


def test_geweke_argument_checks():
    with pytest.raises(ValueError):
        geweke_test(rounds=5)
    with pytest.raises(ValueError):
        geweke_test(sweeps=-1, rounds=20)
    with pytest.raises(ValueError):
        GewekeDesign(runs_h=(1, 1), runs_f=(1,))


@pytest.mark.slow
def test_geweke_short_run_passes_and_mutation_is_caught():
    good = geweke_test(GewekeDesign(), rounds=1500, seed=11)
    assert good.pass_fraction >= 0.85
    bad = geweke_test(GewekeDesign(), rounds=1500, seed=11, mutations=("tau_w_rate_half",))
    assert "tau_w" in bad.failing()


@pytest.mark.slow
def test_geweke_flags_partial_conditioning_under_strong_dependence():
    # conditioning each model mean only on earlier models is not a valid Gibbs step;
    # the bias shows once the prior forces strong inter-model correlation
    priors = geweke_priors()
    priors.v_tilde = np.array([[1.0, 0.9], [0.9, 1.0]])
    priors.v_df_extra = 30
    report = geweke_test(GewekeDesign(priors=priors, chi_scheme="sequential"), rounds=3000, seed=3)
    assert report.max_abs_z > 5
