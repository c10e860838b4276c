"""Acceptance criteria; each test records one PASS/FAIL line shown in the terminal summary.

Criterion 8 needs the external CMIP5 manifest (``CLIMFUSE_CMIP5_MANIFEST``)
and is skipped without it.
"""

import math
import os
import time

import mpmath
import numpy as np
import pytest

from climfuse.bessel import bessel_k1
from climfuse.covariance import whittle_correlation
from climfuse.diagnostics import GewekeDesign, geweke_test
from climfuse.oracles import gaussian_block_checks, oracle_instance, scalar_conjugate_checks, scalar_mh_checks
from climfuse.sampler import ChainConfig, STORED_FIELDS, run_chain
from climfuse.simulate import desk_cmip5_design, desk_design, generate
from harness import fit_replicate, record

pytestmark = pytest.mark.acceptance

REPLICATES = 20


def test_criterion_1_scalar_conditionals():
    started = time.perf_counter()
    results = []
    # one n = 4, M = 3 instance exercises every scalar conditional
    cs = oracle_instance(0)
    rng = np.random.default_rng([0, 1])
    results += scalar_conjugate_checks(cs, rng)
    results += scalar_mh_checks(cs, rng)
    elapsed = time.perf_counter() - started
    worst_ks = max(r.statistic for r in results if r.kind == "KS")
    worst_tv = max(r.statistic for r in results if r.kind == "TV")
    failing = [f"{r.name}={r.statistic:.3g}" for r in results if not r.passed]
    ok = not failing and elapsed < 600
    record(1, ok, f"{len(results)} checks, max KS {worst_ks:.4f} (<0.02), max TV {worst_tv:.4f} (<0.05), "
                  f"{elapsed:.0f} s" + (f"; failing {failing}" if failing else ""))
    assert ok


def test_criterion_2_gaussian_blocks():
    results = []
    for seed, variant in ((0, "full"), (1, "full"), (2, "no-v"), (3, "simplest")):
        cs = oracle_instance(seed, variant=variant)
        results += gaussian_block_checks(cs, np.random.default_rng(seed), points=3)
    worst = max(r.statistic for r in results)
    ok = all(r.passed for r in results)
    record(2, ok, f"{len(results)} block checks over 4 instances, max relative error {worst:.2e} (<1e-6)")
    assert ok


def test_criterion_3_geweke():
    started = time.perf_counter()
    good = geweke_test(GewekeDesign(), rounds=10_000, seed=0)
    bad = geweke_test(GewekeDesign(), rounds=10_000, seed=0, mutations=("tau_w_rate_half",))
    elapsed = time.perf_counter() - started
    ok = len(good.names) >= 12 and good.pass_fraction >= 0.95 and bad.max_abs_z > 5 and elapsed < 1200
    record(3, ok, f"{good.pass_fraction:.0%} of {len(good.names)} statistics |z|<3 (max {good.max_abs_z:.2f}); "
                  f"mutation max |z| {bad.max_abs_z:.1f} on {bad.failing()}; {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def desk_replicates():
    started = time.perf_counter()
    out = [fit_replicate(desk_design, seed, ("full", "simplest")) for seed in range(REPLICATES)]
    return out, time.perf_counter() - started


def test_criterion_4_desk_replication(desk_replicates):
    reps, elapsed = desk_replicates
    full = [r[0] for r in reps]
    wins = sum(r.rmse_post < r.rmse_mmm for r in full) / len(full)
    coverage = sum(r.covered for r in full) / sum(r.sites for r in full)
    ok = wins >= 0.8 and 0.80 <= coverage <= 0.97 and elapsed < 7200
    record(4, ok, f"posterior mean beats multi-model mean in {wins:.0%} of {len(full)} replicates (>=80%); "
                  f"90% coverage {coverage:.3f} (in [0.80, 0.97]); {elapsed:.0f} s for both variants")
    assert ok


def test_criterion_5_variant_degradation(desk_replicates):
    reps, _ = desk_replicates
    cov = {}
    for k, name in enumerate(("full", "simplest")):
        cov[name] = sum(r[k].covered for r in reps) / sum(r[k].sites for r in reps)
    gap = cov["full"] - cov["simplest"]
    ok = gap >= 0.05
    record(5, ok, f"coverage full {cov['full']:.3f}, simplest {cov['simplest']:.3f}, gap {100 * gap:.1f} points (>=5)")
    assert ok


def test_criterion_6_cmip5_sized():
    reps = [fit_replicate(desk_cmip5_design, seed)[0] for seed in range(REPLICATES)]
    wins = sum(r.rmse_post < r.rmse_mmm for r in reps) / len(reps)
    below = sum(r.beta_mean < r.beta_true for r in reps)
    ok = wins >= 0.7
    record(6, ok, f"posterior mean beats multi-model mean in {wins:.0%} of {len(reps)} replicates (>=70%); "
                  f"beta below truth in {below}/{len(reps)} (informational)")
    assert ok


def test_criterion_7_numerics():
    xs = np.logspace(-4, math.log10(50), 100)
    mpmath.mp.dps = 30
    ref = np.array([float(mpmath.besselk(1, x)) for x in xs])
    err = float(np.max(np.abs(bessel_k1(xs) - ref)))
    exact_one = whittle_correlation(0.0, 0.5) == 1.0
    data = generate(desk_design(seed=3))[0]
    cfg = ChainConfig(iterations=60, burn_in=20, seed=42)
    a, b = run_chain(data, cfg), run_chain(data, cfg)
    identical = all(np.array_equal(a[k], b[k]) for k in STORED_FIELDS)
    ok = err < 1e-8 and exact_one and identical
    record(7, ok, f"K1 max abs error {err:.1e} (<1e-8); whittle(0)=1 {exact_one}; seeded chains identical {identical}")
    assert ok


@pytest.mark.fulldata
def test_criterion_8_cmip5_data():
    path = os.environ.get("CLIMFUSE_CMIP5_MANIFEST")
    if not path:
        record(8, None, "skipped: set CLIMFUSE_CMIP5_MANIFEST to the converted CMIP5/reanalysis manifest")
        pytest.skip("CMIP5 manifest not available")
    from climfuse.io import read_manifest
    from climfuse.model import PriorConfig
    from climfuse.summarize import correlation_from_v, multi_model_mean, region_mean_ci

    data, _ = read_manifest(path)
    chain = run_chain(data, ChainConfig(iterations=30_000, burn_in=10_000, seed=1), PriorConfig())
    mean, lo, hi = region_mean_ci(chain, 0.90)
    diff = mean - float(multi_model_mean(data)[1].mean())
    corr, _ = correlation_from_v(chain)
    names = data.model_names
    pair = corr[names.index("CCSM4"), names.index("CESM1-BGC")]
    ok = abs(diff + 0.71) <= 0.15 and abs(lo - 285.02) <= 0.3 and abs(hi - 288.42) <= 0.3 and pair >= 0.95
    record(8, ok, f"difference {diff:.2f} K, interval [{lo:.2f}, {hi:.2f}], CCSM4/CESM1-BGC correlation {pair:.3f}")
    assert ok
