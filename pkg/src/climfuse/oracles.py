"""Brute-force checks of every full conditional against the joint density.

Scalar conditionals are compared with a normalised grid evaluation of
``exp(log_joint_density)``: Kolmogorov-Smirnov distance for exact draws,
total variation of a histogram for Metropolis-Hastings output.  Gaussian
blocks are compared with finite-difference gradients and Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import Grid
from .diagnostics import geweke_priors
from .model import ModelVariant, PriorConfig, build_variant_covariances, log_joint_density
from .sampler import (
    ChainState,
    MHTuner,
    conditional_beta,
    conditional_mu_f,
    conditional_mu_h,
    conditional_phi_actual,
    conditional_phi_run,
    conditional_phi_scale,
    conditional_tau,
    conditional_tau_w,
    conditional_x_f,
    conditional_x_h,
    conditional_y_f,
    conditional_y_f_joint,
    conditional_y_h_joint,
    conditional_y_h,
    conditional_y_ha,
    mh_parameter_names,
    mh_step_consensus_range,
    mh_step_run_range,
    mh_step_shape,
)
from .simulate import draw_data, draw_from_prior, draw_latent

__all__ = [
    "OracleResult",
    "oracle_instance",
    "scalar_conjugate_checks",
    "scalar_mh_checks",
    "gaussian_block_checks",
    "run_oracle_suite",
]

KS_LIMIT = 0.02
TV_LIMIT = 0.05
REL_LIMIT = 1e-6


@dataclass
class OracleResult:
    name: str
    kind: str
    statistic: float
    limit: float

    @property
    def passed(self) -> bool:
        return bool(self.statistic < self.limit)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name} {self.kind}={self.statistic:.3g} (limit {self.limit:g})"


def oracle_instance(seed: int = 0, grid_size: int = 2, runs_h=(2, 1, 1), runs_f=(1, 2, 1), n_obs: int = 2,
                    priors: PriorConfig | None = None, variant=ModelVariant.FULL) -> ChainState:
    """A small, fully specified state drawn from proper priors (n = grid_size**2)."""
    priors = priors or geweke_priors()
    variant = ModelVariant.parse(variant)
    rng = np.random.default_rng(seed)
    grid = Grid.regular(grid_size)
    params, mu_h, mu_f = draw_from_prior(priors, grid.n, len(runs_h), rng, variant)
    state = draw_latent(grid, params, mu_h, mu_f, rng, variant)
    data = draw_data(grid, state, params, runs_h, runs_f, n_obs, rng, variant)
    return ChainState(data, state, params, variant, priors)


def _log_joint(cs: ChainState, covariances=None) -> float:
    return log_joint_density(cs.data, cs.latent, cs.params, cs.variant, cs.priors, covariances)


def _scalar_accessors(name: str):
    base, _, rest = name.partition("[")
    if rest:
        idx = int(rest.rstrip("]")) - 1

        def get(cs):
            return float(getattr(cs.params, base)[idx])

        def set_(cs, value):
            getattr(cs.params, base)[idx] = value

        return get, set_
    return (lambda cs: float(getattr(cs.params, base))), (lambda cs, value: setattr(cs.params, base, value))


def _grid_log_density(cs: ChainState, name: str, values: np.ndarray) -> np.ndarray:
    get, set_ = _scalar_accessors(name)
    keep = get(cs)
    # spatial factors only change with the ranges
    cov = None if name.startswith("gamma") else build_variant_covariances(cs.params, cs.variant, cs.data.grid)
    out = np.empty(values.size)
    try:
        for i, v in enumerate(values):
            set_(cs, float(v))
            out[i] = _log_joint(cs, cov)
    finally:
        set_(cs, keep)
    return out


def _grid_cdf(cs, name, lo, hi, points):
    grid = np.linspace(lo, hi, points)
    logp = _grid_log_density(cs, name, grid)
    dens = np.exp(logp - np.max(logp[np.isfinite(logp)]))
    dens[~np.isfinite(dens)] = 0.0
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))))
    return grid, cdf / cdf[-1]


def _ks(draws: np.ndarray, grid: np.ndarray, cdf: np.ndarray) -> float:
    x = np.sort(draws)
    n = x.size
    f = np.interp(x, grid, cdf)
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def _conjugate_samplers(cs: ChainState) -> dict:
    """Name -> function(rng, size) drawing exactly from the sampler's conditional."""

    def gamma_law(params):
        shape, rate = params
        return lambda rng, size: rng.gamma(shape, 1.0 / rate, size)

    out = {
        "tau_w": gamma_law(conditional_tau_w(cs)),
        "phi_ha": gamma_law(conditional_phi_actual(cs, "h")),
        "phi_fa": gamma_law(conditional_phi_actual(cs, "f")),
        "tau_h": gamma_law(conditional_tau(cs, "h")),
        "tau_f": gamma_law(conditional_tau(cs, "f")),
    }
    for period in ("h", "f"):
        shape, scale = conditional_phi_scale(cs, period)
        out[f"phi_{period}"] = lambda rng, size, a=shape, b=scale: 1.0 / rng.gamma(a, 1.0 / b, size)
    for m in range(cs.M):
        out[f"phi_hm[{m + 1}]"] = gamma_law(conditional_phi_run(cs, "h", m))
        out[f"phi_fm[{m + 1}]"] = gamma_law(conditional_phi_run(cs, "f", m))
    q, v = conditional_beta(cs)
    out["beta"] = lambda rng, size: v / q + rng.standard_normal(size) / np.sqrt(q)
    return out


def scalar_conjugate_checks(cs: ChainState, rng: np.random.Generator, draws: int = 10_000,
                            points: int = 4001) -> list[OracleResult]:
    """KS distance between exact conditional draws and the grid-normalised joint density."""
    results = []
    for name, sampler in _conjugate_samplers(cs).items():
        x = sampler(rng, draws)
        span = x.max() - x.min()
        lo, hi = x.min() - 0.05 * span, x.max() + 0.05 * span
        if name != "beta":
            lo = max(lo, 1e-12)
        grid, cdf = _grid_cdf(cs, name, lo, hi, points)
        results.append(OracleResult(name, "KS", _ks(x, grid, cdf), KS_LIMIT))
    return results


def _mh_steppers(cs: ChainState) -> dict:
    out = {}
    if cs.variant.spatial:
        out["gamma_h"] = lambda rng, tuner: mh_step_consensus_range(cs, rng, tuner, "h")
        out["gamma_f"] = lambda rng, tuner: mh_step_consensus_range(cs, rng, tuner, "f")
        for m in range(cs.M):
            out[f"gamma_hm[{m + 1}]"] = lambda rng, tuner, m=m: mh_step_run_range(cs, rng, tuner, "h", m)
            out[f"gamma_fm[{m + 1}]"] = lambda rng, tuner, m=m: mh_step_run_range(cs, rng, tuner, "f", m)
    out["nu_h"] = lambda rng, tuner: mh_step_shape(cs, rng, tuner, "h")
    out["nu_f"] = lambda rng, tuner: mh_step_shape(cs, rng, tuner, "f")
    return out


def scalar_mh_checks(cs: ChainState, rng: np.random.Generator, steps: int = 100_000, bins: int = 30,
                     points: int = 3001, adapt: int = 2_000, names=None) -> list[OracleResult]:
    """Total-variation distance between an MH histogram and the grid-normalised conditional.

    Step sizes adapt for ``adapt`` iterations, then stay frozen for the
    recorded ``steps`` draws.
    """
    results = []
    steppers = _mh_steppers(cs)
    for name in names or steppers:
        step = steppers[name]
        get, set_ = _scalar_accessors(name)
        start = get(cs)
        tuner = MHTuner(mh_parameter_names(cs.variant, cs.M), 1.0)
        for t in range(1, adapt + 1):
            step(rng, tuner)
            tuner.end_iteration(t)
        tuner.freeze()
        x = np.empty(steps)
        for t in range(steps):
            step(rng, tuner)
            x[t] = get(cs)
        # restore the starting value and its cached spatial factor
        set_(cs, start)
        _refresh(cs)
        lo, hi = np.quantile(x, [1e-4, 1 - 1e-4])
        if name.startswith("gamma"):
            hi = min(hi, cs.priors.range_upper)
        edges = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(x, edges)
        inside = counts.sum()
        grid, cdf = _grid_cdf(cs, name, max(lo, 1e-12), hi, points)
        probs = np.diff(np.interp(edges, grid, cdf))
        tv = 0.5 * float(np.abs(counts / inside - probs / probs.sum()).sum())
        results.append(OracleResult(name, "TV", tv, TV_LIMIT))
    return results


def _refresh(cs: ChainState) -> None:
    cs.cov = build_variant_covariances(cs.params, cs.variant, cs.data.grid)


def _block_accessors(cs: ChainState):
    s = cs.latent
    out = {
        "y_f": (lambda: s.y_f, lambda v: setattr(s, "y_f", v), lambda: conditional_y_f(cs)),
        "y_h": (lambda: s.y_h, lambda v: setattr(s, "y_h", v), lambda: conditional_y_h(cs)),
        "y_ha": (
            lambda: s.y_ha, lambda v: setattr(s, "y_ha", v),
            lambda: (conditional_y_ha(cs)[0] * np.eye(cs.n), conditional_y_ha(cs)[1]),
        ),
        "y_f+y_fa": (
            lambda: np.concatenate([s.y_f, s.y_fa]),
            lambda v: (setattr(s, "y_f", v[: cs.n].copy()), setattr(s, "y_fa", v[cs.n :].copy())),
            lambda: conditional_y_f_joint(cs),
        ),
        "y_h+y_ha": (
            lambda: np.concatenate([s.y_h, s.y_ha]),
            lambda v: (setattr(s, "y_h", v[: cs.n].copy()), setattr(s, "y_ha", v[cs.n :].copy())),
            lambda: conditional_y_h_joint(cs),
        ),
        "mu_f": (lambda: s.mu_f, lambda v: setattr(s, "mu_f", v), lambda: conditional_mu_f(cs)),
        "mu_h": (lambda: s.mu_h, lambda v: setattr(s, "mu_h", v), lambda: conditional_mu_h(cs)),
    }
    for m in range(cs.M):

        def set_col(v, arr, m=m):
            arr[:, m] = v

        out[f"x_h[{m + 1}]"] = (
            lambda m=m: s.x_h[:, m].copy(), lambda v, m=m: set_col(v, s.x_h, m), lambda m=m: conditional_x_h(cs, m)
        )
        out[f"x_f[{m + 1}]"] = (
            lambda m=m: s.x_f[:, m].copy(), lambda v, m=m: set_col(v, s.x_f, m), lambda m=m: conditional_x_f(cs, m)
        )
    return out


def _fd_gradient_hessian(f, x: np.ndarray, h: float):
    n = x.size
    grad = np.empty(n)
    hess = np.empty((n, n))
    f0 = f(x)
    eye = np.eye(n) * h
    for i in range(n):
        fp, fm = f(x + eye[i]), f(x - eye[i])
        grad[i] = (fp - fm) / (2 * h)
        hess[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            val = (f(x + eye[i] + eye[j]) - f(x + eye[i] - eye[j]) - f(x - eye[i] + eye[j]) + f(x - eye[i] - eye[j])) / (4 * h**2)
            hess[i, j] = hess[j, i] = val
    return grad, hess


def gaussian_block_checks(cs: ChainState, rng: np.random.Generator, points: int = 3, h: float = 0.05) -> list[OracleResult]:
    """Relative error of (precision, gradient) against finite differences of the joint density.

    The log density is exactly quadratic in each block, so central
    differences are exact up to rounding.
    """
    results = []
    cov = build_variant_covariances(cs.params, cs.variant, cs.data.grid)
    for name, (get, set_, conditional) in _block_accessors(cs).items():
        keep = np.array(get(), dtype=float)
        worst_q = worst_g = 0.0
        try:
            for _ in range(points):
                prec, lin = conditional()
                point = keep + rng.standard_normal(keep.size) / np.sqrt(np.diag(prec))

                def f(v):
                    set_(np.array(v))
                    return _log_joint(cs, cov)

                grad, hess = _fd_gradient_hessian(f, point, h)
                worst_q = max(worst_q, np.abs(-hess - prec).max() / np.abs(prec).max())
                expected = lin - prec @ point
                scale = max(np.abs(lin).max(), np.abs(prec @ point).max())
                worst_g = max(worst_g, np.abs(grad - expected).max() / scale)
                set_(keep.copy())
        finally:
            set_(keep.copy())
        results.append(OracleResult(f"{name} precision", "relerr", float(worst_q), REL_LIMIT))
        results.append(OracleResult(f"{name} gradient", "relerr", float(worst_g), REL_LIMIT))
    return results


def run_oracle_suite(seed: int = 0, mh_steps: int = 100_000, draws: int = 10_000) -> list[OracleResult]:
    """The full battery on an n = 4, M = 3 instance."""
    rng = np.random.default_rng([seed, 7])
    cs = oracle_instance(seed)
    results = gaussian_block_checks(cs, rng)
    results += scalar_conjugate_checks(cs, rng, draws)
    results += scalar_mh_checks(cs, rng, mh_steps)
    return results
