import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from climfuse.covariance import Grid
from climfuse.model import EnsembleDataset
from climfuse.sampler import ChainOutput
from climfuse.summarize import (
    FieldSummary,
    TooFewDraws,
    correlation_from_v,
    coverage_score,
    multi_model_mean,
    quantile_of_value,
    region_mean_ci,
    summarize,
)


def _chain(y_f, v=None, y_h=None, beta=None):
    y_f = np.asarray(y_f, dtype=float)
    k, n = y_f.shape
    v = np.tile(np.eye(2), (k, 1, 1)) if v is None else np.asarray(v, dtype=float)
    draws = {
        "y_f": y_f,
        "y_h": y_f.copy() if y_h is None else y_h,
        "v": v,
        "beta": np.zeros(k) if beta is None else beta,
    }
    return ChainOutput(draws, {}, {}, 0, [f"m{i}" for i in range(v.shape[1])], np.zeros((n, 2)))


def test_field_summary_uses_linear_quantiles():
    s = FieldSummary.from_draws(np.arange(1.0, 6.0)[:, None])
    assert s.mean[0] == 3.0
    assert s.q50[0] == 3.0
    assert s.q05[0] == pytest.approx(1.2)
    assert s.q95[0] == pytest.approx(4.8)
    assert s.sd[0] == pytest.approx(np.sqrt(2.5))


def test_summarize_requires_two_draws():
    with pytest.raises(TooFewDraws):
        summarize(_chain(np.zeros((1, 3))))


def test_summarize_region_means():
    s = summarize(_chain([[0.0, 2.0], [2.0, 4.0]], beta=np.array([1.0, 3.0])))
    assert s.region_mean_f.tolist() == [1.0, 3.0]
    assert s.beta.mean[0] == 2.0
    assert np.array_equal(s.correlation, np.eye(2))


def test_multi_model_mean_pools_every_run():
    grid = Grid.regular(1)
    data = EnsembleDataset(grid, [np.array([[0.0], [2.0]]), np.array([[4.0]])], [np.ones((1, 1))] * 2, np.zeros((1, 1)))
    mmm_h, mmm_f = multi_model_mean(data)
    assert mmm_h.tolist() == [2.0]
    assert mmm_f.tolist() == [1.0]


def test_quantile_of_value_counts_ties_as_half():
    chain = _chain([[0.0], [1.0], [2.0], [3.0]])
    assert quantile_of_value(chain, np.array([1.0])).tolist() == [0.375]
    with pytest.raises(ValueError):
        quantile_of_value(chain, np.zeros(2))


def test_region_ci_contains_mean():
    rng = np.random.default_rng(0)
    chain = _chain(rng.normal(size=(500, 4)))
    mean, lo, hi = region_mean_ci(chain, 0.9)
    assert lo <= mean <= hi
    assert hi - lo == pytest.approx(2 * 1.645 * 0.5, rel=0.15)
    with pytest.raises(ValueError):
        region_mean_ci(chain, 1.0)


def test_region_ci_constant_draws():
    mean, lo, hi = region_mean_ci(_chain(np.full((10, 3), 0.1)), 0.9)
    assert lo == mean == hi


def test_correlation_pairs_sorted_and_thresholded():
    v = np.array([[1.0, 0.9, 0.0], [0.9, 1.0, 0.75], [0.0, 0.75, 1.0]])
    chain = _chain(np.zeros((2, 1)), v=np.stack([v, v]))
    corr, pairs = correlation_from_v(chain, 0.7)
    assert [(a, b) for a, b, _ in pairs] == [("m0", "m1"), ("m1", "m2")]
    assert corr[0, 1] == pytest.approx(0.9)
    _, none = correlation_from_v(chain, 0.95)
    assert none == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_correlation_matrix_properties(seed, M):
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(5):
        a = rng.normal(size=(M, M))
        v = a @ a.T + 0.1 * np.eye(M)
        draws.append(v / v[0, 0])
    for per_draw in (False, True):
        corr, _ = correlation_from_v(_chain(np.zeros((5, 1)), v=np.stack(draws)), per_draw=per_draw)
        assert np.allclose(np.diag(corr), 1.0)
        assert np.allclose(corr, corr.T)
        assert np.all(np.abs(corr) <= 1.0)


def test_coverage_counts():
    chain = _chain(np.linspace(0, 1, 101)[:, None] * np.ones((1, 2)))
    result = coverage_score([(chain, np.array([0.5, 2.0])), (chain, np.array([0.04, 0.5]))], 0.9)
    assert result.counts.tolist() == [1, 1]
    assert result.rate == 0.5
    with pytest.raises(ValueError):
        coverage_score([(chain, np.zeros(2))])


def test_calibrated_replicates_give_nominal_coverage():
    # truth drawn from the same law as the posterior draws
    rng = np.random.default_rng(1)
    reps = [(_chain(rng.normal(size=(400, 5))), rng.normal(size=5)) for _ in range(200)]
    assert coverage_score(reps, 0.9).rate == pytest.approx(0.9, abs=0.04)
