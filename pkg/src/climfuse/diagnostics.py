"""Chain diagnostics: effective sample size, traces and a getting-it-right test.

The getting-it-right test compares two simulators of the joint law of
parameters, latent fields and data.  The marginal-conditional simulator
draws everything forward from the prior.  The successive-conditional
simulator draws once, then alternates sampler sweeps with regenerating
the data from the current state.  A correct sampler makes both produce the
same distribution, so monitored moments must agree.
"""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ModelVariant, PriorConfig
from .sampler import ChainOutput, ChainState, MHTuner, mh_parameter_names, sweep
from .simulate import draw_data, draw_from_prior, draw_latent
from .covariance import Grid
from .summarize import TooFewDraws

__all__ = [
    "DegenerateSeriesWarning",
    "UnknownParameter",
    "effective_sample_size",
    "export_trace",
    "GewekeDesign",
    "GewekeReport",
    "DEFAULT_MONITORS",
    "geweke_priors",
    "geweke_test",
]


class DegenerateSeriesWarning(RuntimeWarning):
    """The series has zero variance; ESS falls back to the draw count."""


class UnknownParameter(KeyError):
    pass


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    centred = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centred, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[:n]
    return acov / acov[0]


def effective_sample_size(draws) -> float:
    """ESS from the initial positive sequence of paired autocorrelations.

    Sums ``rho_{2k} + rho_{2k+1}`` while positive; the result never exceeds
    the number of draws.  A constant series returns the draw count and warns.
    """
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise TooFewDraws(f"effective sample size needs at least 10 draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if np.ptp(x) == 0 or np.var(x) <= 1e-300:
        warnings.warn("constant series; ESS set to the draw count", DegenerateSeriesWarning, stacklevel=2)
        return float(n)
    rho = _autocorrelation(x)
    total = 0.0
    for k in range(n // 2):
        pair = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1e-12)
    return float(min(n, n / tau))


_INDEXED = re.compile(r"^([a-z_]+)\[(\d+)(?:,(\d+))?\]$")


def _series(chain: ChainOutput, name: str) -> np.ndarray:
    key = name.replace(" ", "")
    match = _INDEXED.match(key)
    base = match.group(1) if match else key
    if base not in chain.draws:
        raise UnknownParameter(name)
    draws = chain.draws[base]
    if match is None:
        if draws.ndim != 1:
            raise UnknownParameter(f"{name} is not scalar; give an index such as {base}[1]")
        return draws.copy()
    idx = [int(match.group(2)) - 1] + ([int(match.group(3)) - 1] if match.group(3) else [])
    if len(idx) != draws.ndim - 1 or any(i < 0 or i >= s for i, s in zip(idx, draws.shape[1:])):
        raise UnknownParameter(f"{name}: index out of range for shape {draws.shape[1:]}")
    return draws[(slice(None), *idx)].copy()


def export_trace(chain: ChainOutput, name: str, path=None) -> np.ndarray:
    """Ordered post-burn-in series of one scalar; names like ``beta``, ``phi_hm[2]``, ``v[1,2]``.

    Writes ``draw,value`` CSV when ``path`` is given.
    """
    series = _series(chain, name)
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["draw", "value"])
            for i, v in enumerate(series, start=1):
                writer.writerow([i, repr(float(v))])
    return series


def geweke_priors() -> PriorConfig:
    """Proper, moderately informative priors so forward simulation is well behaved."""
    return PriorConfig(
        mu_variance=1.0,
        beta_variance=1.0,
        tau_prior=(10.0, 10.0),
        tau_w_prior=(10.0, 10.0),
        nu_prior=(20.0, 1.0),
        phi_prior=(10.0, 90.0),
        range_upper=1.0,
        v_df_extra=4,
    )


@dataclass
class GewekeDesign:
    """Small problem for the getting-it-right test (n <= 9 and M <= 3 keep it fast)."""

    grid_size: int = 3
    runs_h: tuple = (2, 1)
    runs_f: tuple = (1, 2)
    n_obs: int = 2
    priors: PriorConfig = field(default_factory=geweke_priors)
    variant: ModelVariant = ModelVariant.FULL
    kappa: float = 1.0
    chi_scheme: str = "full"
    v_update: str = "conditional"
    mh_step: float = 0.5

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if len(self.runs_h) != len(self.runs_f):
            raise ValueError("runs_h and runs_f need one entry per model")

    @property
    def M(self) -> int:
        return len(self.runs_h)


def _v(p, i, j):
    return p.v[i, j] if p.v.shape[0] > max(i, j) else 0.0


DEFAULT_MONITORS = {
    "beta": lambda s, p: p.beta,
    "beta^2": lambda s, p: p.beta**2,
    "tau_w": lambda s, p: p.tau_w,
    "tau_h": lambda s, p: p.tau_h,
    "tau_f": lambda s, p: p.tau_f,
    "v[1,2]": lambda s, p: _v(p, 0, 1),
    "v[2,2]": lambda s, p: _v(p, 1, 1),
    "y_f(s1)": lambda s, p: s.y_f[0],
    "y_f(s1)^2": lambda s, p: s.y_f[0] ** 2,
    "y_h(s1)": lambda s, p: s.y_h[0],
    "mu_h(s1)": lambda s, p: s.mu_h[0],
    "mu_f(s1)": lambda s, p: s.mu_f[0],
    "x_h1(s1)": lambda s, p: s.x_h[0, 0],
    "x_f2(s2)": lambda s, p: s.x_f[1, -1],
    "phi_ha": lambda s, p: p.phi_ha,
    "phi_h": lambda s, p: p.phi_h,
    "phi_hm[1]": lambda s, p: p.phi_hm[0],
    "nu_h": lambda s, p: p.nu_h,
    "gamma_h": lambda s, p: p.gamma_h,
    "gamma_hm[1]": lambda s, p: p.gamma_hm[0],
}


@dataclass
class GewekeReport:
    names: list
    z: np.ndarray
    marginal_mean: np.ndarray
    successive_mean: np.ndarray
    rounds: int
    sweeps: int
    threshold: float = 3.0

    @property
    def passed(self) -> np.ndarray:
        return np.abs(self.z) < self.threshold

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean())

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def ok(self, required: float = 0.95) -> bool:
        return self.pass_fraction >= required

    def failing(self) -> list[str]:
        return [n for n, ok in zip(self.names, self.passed) if not ok]

    def rows(self) -> list[dict]:
        return [
            {"statistic": n, "z": float(z), "marginal_mean": float(a), "successive_mean": float(b), "pass": bool(ok)}
            for n, z, a, b, ok in zip(self.names, self.z, self.marginal_mean, self.successive_mean, self.passed)
        ]


def _forward(design: GewekeDesign, grid: Grid, rng: np.random.Generator):
    params, mu_h, mu_f = draw_from_prior(design.priors, grid.n, design.M, rng, design.variant, design.kappa)
    state = draw_latent(grid, params, mu_h, mu_f, rng, design.variant)
    data = draw_data(grid, state, params, design.runs_h, design.runs_f, design.n_obs, rng, design.variant)
    return state, params, data


def geweke_test(
    design: GewekeDesign | None = None,
    sweeps: int = 1,
    monitors: dict | None = None,
    rounds: int = 10_000,
    seed: int = 0,
    mutations=(),
) -> GewekeReport:
    """Getting-it-right comparison of forward and successive-conditional simulation.

    ``z`` divides the mean difference by ``sqrt(var_mc / rounds + var_sc / ess_sc)``.
    With ``sweeps=0`` the successive simulator performs no MCMC move and is
    defined as the forward simulator on the same random stream, so every
    ``z`` is exactly zero.
    """
    design = design or GewekeDesign()
    monitors = monitors or DEFAULT_MONITORS
    if rounds < 10:
        raise ValueError("rounds must be >= 10")
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    names = list(monitors)
    funcs = [monitors[k] for k in names]
    grid = Grid.regular(design.grid_size)

    rng_mc = np.random.default_rng([seed, 0])
    mc = np.empty((rounds, len(names)))
    for r in range(rounds):
        state, params, _ = _forward(design, grid, rng_mc)
        mc[r] = [f(state, params) for f in funcs]

    if sweeps == 0:
        sc = mc.copy()
    else:
        rng_sc = np.random.default_rng([seed, 1])
        state, params, data = _forward(design, grid, rng_sc)
        cs = ChainState(data, state, params, design.variant, design.priors, design.chi_scheme, design.v_update, mutations)
        tuner = MHTuner(mh_parameter_names(cs.variant, design.M), design.mh_step)
        tuner.freeze()
        sc = np.empty((rounds, len(names)))
        for r in range(rounds):
            for _ in range(sweeps):
                sweep(cs, rng_sc, tuner, r + 1)
            cs.data = draw_data(grid, cs.latent, cs.params, design.runs_h, design.runs_f, design.n_obs, rng_sc, design.variant)
            cs.run_sum_h = np.stack([x.sum(axis=0) for x in cs.data.runs_h], axis=1)
            cs.run_sum_f = np.stack([x.sum(axis=0) for x in cs.data.runs_f], axis=1)
            cs.obs_sum = cs.data.obs.sum(axis=0)
            sc[r] = [f(cs.latent, cs.params) for f in funcs]

    z = np.zeros(len(names))
    for k in range(len(names)):
        diff = mc[:, k].mean() - sc[:, k].mean()
        if diff == 0.0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSeriesWarning)
            ess = effective_sample_size(sc[:, k])
        se2 = mc[:, k].var(ddof=1) / rounds + sc[:, k].var(ddof=1) / ess
        z[k] = diff / np.sqrt(se2) if se2 > 0 else np.inf * np.sign(diff)
    return GewekeReport(names, z, mc.mean(axis=0), sc.mean(axis=0), rounds, sweeps)
