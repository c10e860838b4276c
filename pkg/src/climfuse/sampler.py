"""Gibbs / Metropolis-Hastings engine for the hierarchical ensemble model.

One iteration runs, in order: expected and actual climate, model means,
consensus fields, conjugate precisions, the dependence matrix ``V``,
``beta``, the range parameters (MH) and the Gamma shapes (MH).

Each ``conditional_*`` helper returns the natural parameters of a full
conditional (``(precision, precision @ mean)`` for Gaussians,
``(shape, rate)`` for Gamma laws) so tests can compare them against
:func:`climfuse.model.log_joint_density` directly.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import invwishart

from .covariance import NotPositiveDefinite, factor, sample_gaussian_precision
from .model import (
    EnsembleDataset,
    HyperParams,
    LatentState,
    ModelVariant,
    PriorConfig,
    SpatialTerm,
    build_variant_covariances,
    draw_constrained_v,
    partition_coefficients,
)

__all__ = [
    "ChainConfig",
    "ChainOutput",
    "ChainState",
    "MHTuner",
    "SamplerError",
    "STORED_FIELDS",
    "initialize_state",
    "conditional_y_f_joint",
    "conditional_y_h_joint",
    "update_expected_and_actual",
    "update_model_means",
    "update_consensus",
    "update_conjugate_scales",
    "update_v",
    "update_beta",
    "update_ranges_mh",
    "update_shapes_mh",
    "sweep",
    "iterate_chain",
    "run_chain",
]

CHI_SCHEMES = ("full", "sequential")
V_UPDATES = ("conditional", "rescale")
KNOWN_MUTATIONS = ("tau_w_rate_half",)

STORED_FIELDS = (
    "y_h", "y_f", "mu_h", "mu_f", "beta", "v", "tau_h", "tau_f", "gamma_h", "gamma_f",
    "nu_h", "nu_f", "tau_w", "phi_ha", "phi_fa", "phi_h", "phi_f",
    "phi_hm", "phi_fm", "gamma_hm", "gamma_fm",
)
_LATENT_FIELDS = ("y_h", "y_f", "mu_h", "mu_f")


class SamplerError(RuntimeError):
    """A chain could not continue (e.g. a factorization failed past the jitter cap)."""


@dataclass
class ChainConfig:
    """Run-length, seeding and MH-tuning settings for one chain.

    ``chi_scheme`` selects how each model mean is conditioned on the others:
    ``"full"`` uses all other models, ``"sequential"`` only models before it.
    ``v_update`` is ``"conditional"`` (exact draw given ``V[0, 0] = 1``) or
    ``"rescale"`` (unconstrained inverse-Wishart draw divided by its corner).
    """

    iterations: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    mh_initial_step: float | dict = 0.5
    adapt_target: float = 0.44
    adapt_window: int = 50
    variant: ModelVariant = ModelVariant.FULL
    kappa: float = 1.0
    chi_scheme: str = "full"
    v_update: str = "conditional"

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if self.iterations < 1 or self.burn_in < 0 or self.burn_in >= self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 < self.adapt_target < 1 or self.adapt_window < 1:
            raise ValueError("adapt_target must lie in (0, 1) and adapt_window be >= 1")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.chi_scheme not in CHI_SCHEMES:
            raise ValueError(f"chi_scheme must be one of {CHI_SCHEMES}")
        if self.v_update not in V_UPDATES:
            raise ValueError(f"v_update must be one of {V_UPDATES}")
        steps = self.mh_initial_step.values() if isinstance(self.mh_initial_step, dict) else [self.mh_initial_step]
        if any(not s > 0 for s in steps):
            raise ValueError("MH steps must be positive")

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws, keyed by field name (leading axis = draw)."""

    draws: dict
    acceptance: dict
    config: dict
    seed: int
    model_names: list
    sites: np.ndarray
    variant: str = ModelVariant.FULL.value
    metric: str = "euclidean"
    wall_time: float = 0.0

    @property
    def n_draws(self) -> int:
        return int(next(iter(self.draws.values())).shape[0]) if self.draws else 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[name]


class MHTuner:
    """Per-parameter log-scale random-walk steps with windowed Robbins-Monro adaptation."""

    def __init__(self, names, initial=0.5, target: float = 0.44, window: int = 50):
        self.target = target
        self.window = window
        self.step = {}
        for name in names:
            if isinstance(initial, dict):
                base = name.split("[")[0]
                self.step[name] = float(initial.get(name, initial.get(base, 0.5)))
            else:
                self.step[name] = float(initial)
        self.accepted = dict.fromkeys(self.step, 0)
        self.proposed = dict.fromkeys(self.step, 0)
        self._win_acc = dict.fromkeys(self.step, 0)
        self._win_prop = dict.fromkeys(self.step, 0)
        self._adaptations = 0
        self.adapting = True

    def record(self, name: str, accepted: bool) -> None:
        self.proposed[name] += 1
        self.accepted[name] += int(accepted)
        self._win_prop[name] += 1
        self._win_acc[name] += int(accepted)

    def end_iteration(self, iteration: int) -> None:
        if not self.adapting or iteration % self.window:
            return
        self._adaptations += 1
        gain = 1.0 / math.sqrt(self._adaptations)
        for name in self.step:
            if self._win_prop[name]:
                rate = self._win_acc[name] / self._win_prop[name]
                self.step[name] *= math.exp(gain * (rate - self.target))
                self.step[name] = min(max(self.step[name], 1e-4), 10.0)
            self._win_acc[name] = 0
            self._win_prop[name] = 0

    def freeze(self) -> None:
        """Stop adapting and reset the acceptance counters."""
        self.adapting = False
        self.accepted = dict.fromkeys(self.step, 0)
        self.proposed = dict.fromkeys(self.step, 0)

    def rates(self) -> dict:
        return {k: (self.accepted[k] / self.proposed[k] if self.proposed[k] else float("nan")) for k in self.step}


class ChainState:
    """Mutable state of one chain: latent fields, parameters and cached spatial factors."""

    def __init__(
        self,
        data: EnsembleDataset,
        latent: LatentState,
        params: HyperParams,
        variant: ModelVariant = ModelVariant.FULL,
        priors: PriorConfig | None = None,
        chi_scheme: str = "full",
        v_update: str = "conditional",
        mutations=(),
    ):
        self.data = data
        self.latent = latent
        self.params = params
        self.variant = ModelVariant.parse(variant)
        self.priors = priors or PriorConfig()
        if chi_scheme not in CHI_SCHEMES or v_update not in V_UPDATES:
            raise ValueError("unknown chi_scheme or v_update")
        unknown = set(mutations) - set(KNOWN_MUTATIONS)
        if unknown:
            raise ValueError(f"unknown mutations: {sorted(unknown)}")
        self.chi_scheme = chi_scheme
        self.v_update = v_update
        self.mutations = frozenset(mutations)
        latent.check(data.n, data.M)
        if not self.variant.model_dependence:
            params.v = np.eye(data.M)
        self.cov = build_variant_covariances(params, self.variant, data.grid)
        self.run_sum_h = np.stack([r.sum(axis=0) for r in data.runs_h], axis=1)
        self.run_sum_f = np.stack([r.sum(axis=0) for r in data.runs_f], axis=1)
        self.obs_sum = data.obs.sum(axis=0)

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def M(self) -> int:
        return self.data.M

    def v_inverse(self) -> np.ndarray:
        return factor(self.params.v).inverse()

    def set_v(self, v: np.ndarray) -> None:
        self.params.v = v
        self.cov.v = v

    def deviations(self) -> tuple[np.ndarray, np.ndarray]:
        """Model-mean deviations ``E_H``, ``E_F`` (each ``n x M``)."""
        s, p = self.latent, self.params
        e_h = s.x_h - s.mu_h[:, None]
        e_f = s.x_f - s.mu_f[:, None] - p.beta * e_h
        return e_h, e_f

    def y_deviations(self) -> tuple[np.ndarray, np.ndarray]:
        s, p = self.latent, self.params
        d_h = s.y_h - s.mu_h
        d_f = s.y_f - s.mu_f - p.beta * d_h
        return d_h, d_f


# ---------------------------------------------------------------- Y block


def conditional_y_f(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    s, p, sf = cs.latent, cs.params, cs.cov.sigma_f
    w = p.tau_f / p.kappa
    prec = w * sf.inv + p.phi_fa * np.eye(cs.n)
    lin = w * sf.inv @ (s.mu_f + p.beta * (s.y_h - s.mu_h)) + p.phi_fa * s.y_fa
    return prec, lin


def conditional_y_h(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    s, p = cs.latent, cs.params
    sh, sf = cs.cov.sigma_h, cs.cov.sigma_f
    wf = p.tau_f / p.kappa
    wh = p.tau_h / p.kappa
    prec = wf * p.beta**2 * sf.inv + wh * sh.inv + p.phi_ha * np.eye(cs.n)
    lin = (
        wf * p.beta * sf.inv @ (s.y_f - s.mu_f + p.beta * s.mu_h)
        + wh * sh.inv @ s.mu_h
        + p.phi_ha * s.y_ha
    )
    return prec, lin


def conditional_y_ha(cs: ChainState) -> tuple[float, np.ndarray]:
    """Scalar precision (times identity) and linear term of ``Y_Ha``."""
    s, p = cs.latent, cs.params
    prec = p.phi_ha + cs.data.N * p.tau_w
    return prec, p.phi_ha * s.y_h + p.tau_w * cs.obs_sum


def _pair_precision(top: np.ndarray, phi: float, bottom: float) -> np.ndarray:
    n = top.shape[0]
    eye = np.eye(n)
    return np.block([[top, -phi * eye], [-phi * eye, bottom * eye]])


def conditional_y_f_joint(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    """Joint precision and linear term of the stacked ``(Y_F, Y_Fa)`` block."""
    s, p, sf = cs.latent, cs.params, cs.cov.sigma_f
    w = p.tau_f / p.kappa
    prec = _pair_precision(w * sf.inv + p.phi_fa * np.eye(cs.n), p.phi_fa, p.phi_fa)
    lin = np.concatenate([w * sf.inv @ (s.mu_f + p.beta * (s.y_h - s.mu_h)), np.zeros(cs.n)])
    return prec, lin


def conditional_y_h_joint(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    """Joint precision and linear term of the stacked ``(Y_H, Y_Ha)`` block."""
    s, p = cs.latent, cs.params
    sh, sf = cs.cov.sigma_h, cs.cov.sigma_f
    wf = p.tau_f / p.kappa
    wh = p.tau_h / p.kappa
    top = wf * p.beta**2 * sf.inv + wh * sh.inv + p.phi_ha * np.eye(cs.n)
    prec = _pair_precision(top, p.phi_ha, p.phi_ha + cs.data.N * p.tau_w)
    lin_h = wf * p.beta * sf.inv @ (s.y_f - s.mu_f + p.beta * s.mu_h) + wh * sh.inv @ s.mu_h
    return prec, np.concatenate([lin_h, p.tau_w * cs.obs_sum])


def update_expected_and_actual(cs: ChainState, rng: np.random.Generator) -> None:
    # each latent field is drawn jointly with its noisy counterpart; updating
    # them one at a time mixes very slowly along smooth spatial directions
    s, n = cs.latent, cs.n
    prec, lin = conditional_y_f_joint(cs)
    draw = sample_gaussian_precision(lin, prec, rng)
    s.y_f, s.y_fa = draw[:n], draw[n:]
    prec, lin = conditional_y_h_joint(cs)
    draw = sample_gaussian_precision(lin, prec, rng)
    s.y_h, s.y_ha = draw[:n], draw[n:]


# ---------------------------------------------------------------- model means


def _dependence_weights(cs: ChainState, m: int, vinv: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, float]:
    """Indices of conditioning models, their weights and the residual variance factor."""
    if cs.chi_scheme == "sequential":
        idx = np.arange(m)
        a, s = partition_coefficients(cs.params.v, m, idx)
        return idx, a, s
    idx = np.delete(np.arange(cs.M), m)
    s = 1.0 / vinv[m, m]
    return idx, -vinv[m, idx] * s, s


def conditional_x_h(cs: ChainState, m: int, vinv: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    s, p, cov = cs.latent, cs.params, cs.cov
    if vinv is None and cs.chi_scheme == "full":
        vinv = cs.v_inverse()
    idx, a, resid = _dependence_weights(cs, m, vinv)
    e_h, e_f = cs.deviations()
    c_h = e_h[:, idx] @ a
    c_f = e_f[:, idx] @ a
    shm = cov.sigma_hm[m]
    wh = p.tau_h / resid
    wf = p.tau_f / resid
    R = cs.data.runs_h[m].shape[0]
    prec = R * p.phi_hm[m] * shm.inv + wh * cov.sigma_h.inv + p.beta**2 * wf * cov.sigma_f.inv
    lin = (
        p.phi_hm[m] * shm.inv @ cs.run_sum_h[:, m]
        + wh * cov.sigma_h.inv @ (s.mu_h + c_h)
        + wf * cov.sigma_f.inv @ (p.beta * (s.x_f[:, m] - s.mu_f + p.beta * s.mu_h - c_f))
    )
    return prec, lin


def conditional_x_f(cs: ChainState, m: int, vinv: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    s, p, cov = cs.latent, cs.params, cs.cov
    if vinv is None and cs.chi_scheme == "full":
        vinv = cs.v_inverse()
    idx, a, resid = _dependence_weights(cs, m, vinv)
    _, e_f = cs.deviations()
    c_f = e_f[:, idx] @ a
    sfm = cov.sigma_fm[m]
    wf = p.tau_f / resid
    R = cs.data.runs_f[m].shape[0]
    prec = R * p.phi_fm[m] * sfm.inv + wf * cov.sigma_f.inv
    lin = p.phi_fm[m] * sfm.inv @ cs.run_sum_f[:, m] + wf * cov.sigma_f.inv @ (
        s.mu_f + p.beta * (s.x_h[:, m] - s.mu_h) + c_f
    )
    return prec, lin


def update_model_means(cs: ChainState, rng: np.random.Generator) -> None:
    vinv = cs.v_inverse() if cs.chi_scheme == "full" else None
    for m in range(cs.M):
        prec, lin = conditional_x_h(cs, m, vinv)
        cs.latent.x_h[:, m] = sample_gaussian_precision(lin, prec, rng)
    for m in range(cs.M):
        prec, lin = conditional_x_f(cs, m, vinv)
        cs.latent.x_f[:, m] = sample_gaussian_precision(lin, prec, rng)


# ---------------------------------------------------------------- consensus


def _consensus_pieces(cs: ChainState):
    vinv = cs.v_inverse()
    p1 = vinv.sum(axis=1)
    s_tot = float(p1.sum())
    return p1, s_tot


def conditional_mu_f(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    s, p, sf = cs.latent, cs.params, cs.cov.sigma_f
    p1, s_tot = _consensus_pieces(cs)
    z = s.x_f - p.beta * s.x_h
    prec = p.tau_f * (1.0 / p.kappa + s_tot) * sf.inv + np.eye(cs.n) / cs.priors.mu_variance
    lin = sf.inv @ (
        p.tau_f / p.kappa * (s.y_f - p.beta * (s.y_h - s.mu_h))
        + p.tau_f * (s_tot * p.beta * s.mu_h + z @ p1)
    )
    return prec, lin


def conditional_mu_h(cs: ChainState) -> tuple[np.ndarray, np.ndarray]:
    s, p = cs.latent, cs.params
    sh, sf = cs.cov.sigma_h, cs.cov.sigma_f
    p1, s_tot = _consensus_pieces(cs)
    z = s.x_f - p.beta * s.x_h
    prec = (
        p.tau_h * (1.0 / p.kappa + s_tot) * sh.inv
        + p.beta**2 * p.tau_f * (1.0 / p.kappa + s_tot) * sf.inv
        + np.eye(cs.n) / cs.priors.mu_variance
    )
    lin = sh.inv @ (p.tau_h / p.kappa * s.y_h + p.tau_h * (s.x_h @ p1)) + sf.inv @ (
        p.tau_f * p.beta / p.kappa * (s.mu_f + p.beta * s.y_h - s.y_f)
        + p.tau_f * p.beta * (s_tot * s.mu_f - z @ p1)
    )
    return prec, lin


def update_consensus(cs: ChainState, rng: np.random.Generator) -> None:
    cs.latent.mu_f = sample_gaussian_precision(*reversed(conditional_mu_f(cs)), rng)
    cs.latent.mu_h = sample_gaussian_precision(*reversed(conditional_mu_h(cs)), rng)


# ---------------------------------------------------------------- conjugate scales


def conditional_tau_w(cs: ChainState) -> tuple[float, float]:
    a, b = cs.priors.tau_w_prior
    resid = cs.data.obs - cs.latent.y_ha
    rate = b + 0.5 * float(np.sum(resid**2))
    if "tau_w_rate_half" in cs.mutations:
        rate *= 0.5
    return cs.data.N * cs.n / 2 + a, rate


def conditional_phi_actual(cs: ChainState, period: str) -> tuple[float, float]:
    s, p = cs.latent, cs.params
    if period == "h":
        resid, nu, phi = s.y_ha - s.y_h, p.nu_h, p.phi_h
    else:
        resid, nu, phi = s.y_fa - s.y_f, p.nu_f, p.phi_f
    return cs.n / 2 + nu / (2 * p.kappa), 0.5 * float(resid @ resid) + nu / (2 * p.kappa * phi)


def conditional_phi_scale(cs: ChainState, period: str) -> tuple[float, float]:
    """Inverse-gamma ``(shape, scale)`` of ``phi_H`` or ``phi_F``."""
    p = cs.params
    a, b = cs.priors.phi_prior
    if period == "h":
        nu, phis, phia = p.nu_h, p.phi_hm, p.phi_ha
    else:
        nu, phis, phia = p.nu_f, p.phi_fm, p.phi_fa
    shape = a + nu * cs.M / 2 + nu / (2 * p.kappa)
    scale = b + nu * float(phis.sum()) / 2 + nu * phia / (2 * p.kappa)
    return shape, scale


def _chi_trace(dev: np.ndarray, sigma: SpatialTerm, vinv: np.ndarray) -> float:
    return float(np.sum((sigma.inv @ dev @ vinv) * dev))


def conditional_tau(cs: ChainState, period: str, vinv: np.ndarray | None = None) -> tuple[float, float]:
    a, b = cs.priors.tau_prior
    p = cs.params
    vinv = cs.v_inverse() if vinv is None else vinv
    e_h, e_f = cs.deviations()
    d_h, d_f = cs.y_deviations()
    if period == "h":
        dev, d, sigma = e_h, d_h, cs.cov.sigma_h
    else:
        dev, d, sigma = e_f, d_f, cs.cov.sigma_f
    rate = b + sigma.qf(d) / (2 * p.kappa) + 0.5 * _chi_trace(dev, sigma, vinv)
    return (cs.M + 1) * cs.n / 2 + a, rate


def conditional_phi_run(cs: ChainState, period: str, m: int) -> tuple[float, float]:
    p = cs.params
    if period == "h":
        runs, x, sigma, nu, phi = cs.data.runs_h[m], cs.latent.x_h[:, m], cs.cov.sigma_hm[m], p.nu_h, p.phi_h
    else:
        runs, x, sigma, nu, phi = cs.data.runs_f[m], cs.latent.x_f[:, m], cs.cov.sigma_fm[m], p.nu_f, p.phi_f
    R = runs.shape[0]
    qf = sigma.qf((runs - x).T)
    return (cs.n * R + nu) / 2, 0.5 * (qf + nu / phi)


def _gamma(rng, shape, rate):
    return rng.gamma(shape, 1.0 / rate)


def update_conjugate_scales(cs: ChainState, rng: np.random.Generator) -> None:
    p = cs.params
    p.tau_w = _gamma(rng, *conditional_tau_w(cs))
    p.phi_ha = _gamma(rng, *conditional_phi_actual(cs, "h"))
    p.phi_fa = _gamma(rng, *conditional_phi_actual(cs, "f"))
    shape, scale = conditional_phi_scale(cs, "h")
    p.phi_h = 1.0 / rng.gamma(shape, 1.0 / scale)
    shape, scale = conditional_phi_scale(cs, "f")
    p.phi_f = 1.0 / rng.gamma(shape, 1.0 / scale)
    vinv = cs.v_inverse()
    p.tau_h = _gamma(rng, *conditional_tau(cs, "h", vinv))
    p.tau_f = _gamma(rng, *conditional_tau(cs, "f", vinv))
    for m in range(cs.M):
        p.phi_hm[m] = _gamma(rng, *conditional_phi_run(cs, "h", m))
    for m in range(cs.M):
        p.phi_fm[m] = _gamma(rng, *conditional_phi_run(cs, "f", m))


# ---------------------------------------------------------------- V


def v_conditional_parameters(cs: ChainState) -> tuple[np.ndarray, float]:
    """Scale matrix and degrees of freedom of the inverse-Wishart conditional of ``V``."""
    p = cs.params
    d = cs.priors.v_df_extra
    e_h, e_f = cs.deviations()
    psi = (
        d * cs.priors.v_prior_mean(cs.M)
        + p.tau_h * e_h.T @ cs.cov.sigma_h.inv @ e_h
        + p.tau_f * e_f.T @ cs.cov.sigma_f.inv @ e_f
    )
    return 0.5 * (psi + psi.T), 2 * cs.n + cs.M + d + 1


def update_v(cs: ChainState, rng: np.random.Generator) -> None:
    if not cs.variant.model_dependence or cs.M == 1:
        return
    psi, df = v_conditional_parameters(cs)
    if cs.v_update == "conditional":
        cs.set_v(draw_constrained_v(psi, df, rng))
        return
    raw = np.atleast_2d(invwishart.rvs(df=df, scale=psi, random_state=rng))
    c = raw[0, 0]
    v = raw / c
    v[0, 0] = 1.0
    cs.set_v(0.5 * (v + v.T))
    # keep tau^{-1} V unchanged so the drawn covariance is preserved
    cs.params.tau_h /= c
    cs.params.tau_f /= c


# ---------------------------------------------------------------- beta


def conditional_beta(cs: ChainState, vinv: np.ndarray | None = None) -> tuple[float, float]:
    """Precision ``Q`` and linear term ``v`` of ``beta``'s Gaussian conditional."""
    s, p, sf = cs.latent, cs.params, cs.cov.sigma_f
    vinv = cs.v_inverse() if vinv is None else vinv
    d_y = s.y_h - s.mu_h
    e_h = s.x_h - s.mu_h[:, None]
    g = s.x_f - s.mu_f[:, None]
    sf_eh = sf.inv @ e_h
    w = p.tau_f / p.kappa
    q = w * float(d_y @ sf.inv @ d_y) + p.tau_f * float(np.sum((sf_eh @ vinv) * e_h)) + 1.0 / cs.priors.beta_variance
    v = w * float(d_y @ sf.inv @ (s.y_f - s.mu_f)) + p.tau_f * float(np.sum((sf_eh @ vinv) * g))
    return q, v


def update_beta(cs: ChainState, rng: np.random.Generator) -> None:
    q, v = conditional_beta(cs)
    cs.params.beta = v / q + rng.standard_normal() / math.sqrt(q)


# ---------------------------------------------------------------- MH steps


def log_target_gamma_consensus(cs: ChainState, period: str, term: SpatialTerm) -> float:
    """Log conditional of ``gamma_H``/``gamma_F`` (up to a constant) for the given spatial term."""
    p = cs.params
    vinv = cs.v_inverse()
    e_h, e_f = cs.deviations()
    d_h, d_f = cs.y_deviations()
    if period == "h":
        tau, dev, d = p.tau_h, e_h, d_h
    else:
        tau, dev, d = p.tau_f, e_f, d_f
    return (
        -0.5 * (cs.M + 1) * term.logdet
        - 0.5 * tau / p.kappa * term.qf(d)
        - 0.5 * tau * _chi_trace(dev, term, vinv)
    )


def log_target_gamma_run(cs: ChainState, period: str, m: int, term: SpatialTerm) -> float:
    p = cs.params
    if period == "h":
        runs, x, phi = cs.data.runs_h[m], cs.latent.x_h[:, m], p.phi_hm[m]
    else:
        runs, x, phi = cs.data.runs_f[m], cs.latent.x_f[:, m], p.phi_fm[m]
    R = runs.shape[0]
    return -0.5 * R * term.logdet - 0.5 * phi * term.qf((runs - x).T)


def _log_gamma_pdf(x, shape, rate):
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x


def log_target_nu(cs: ChainState, period: str, nu: float) -> float:
    if not nu > 0:
        return -math.inf
    p = cs.params
    if period == "h":
        phis, phi, phia = p.phi_hm, p.phi_h, p.phi_ha
    else:
        phis, phi, phia = p.phi_fm, p.phi_f, p.phi_fa
    a, b = cs.priors.nu_prior
    k = p.kappa
    shape, rate = nu / 2, nu / (2 * phi)
    total = len(phis) * (shape * math.log(rate) - math.lgamma(shape))
    total += (shape - 1.0) * float(np.log(phis).sum()) - rate * float(phis.sum())
    total += _log_gamma_pdf(phia, nu / (2 * k), nu / (2 * k * phi))
    total += (a - 1.0) * math.log(nu) - b * nu
    return total


def _mh_log_step(rng, tuner: MHTuner, name: str, current: float, current_lp: float, log_target, upper=math.inf):
    """Random walk on ``log(value)``; returns ``(value, payload)`` with payload None on rejection.

    ``log_target(value)`` returns ``(log density, payload)``; the log-Jacobian
    of the log transform enters the acceptance ratio.
    """
    proposal = current * math.exp(tuner.step[name] * rng.standard_normal())
    log_u = math.log(rng.uniform())
    if not (0 < proposal <= upper):
        tuner.record(name, False)
        return current, None
    lp_new, payload = log_target(proposal)
    accepted = log_u < lp_new - current_lp + math.log(proposal) - math.log(current)
    tuner.record(name, accepted)
    if not accepted:
        return current, None
    return proposal, (True if payload is None else payload)


def mh_parameter_names(variant: ModelVariant, M: int) -> list[str]:
    names = []
    if ModelVariant.parse(variant).spatial:
        names += ["gamma_h", "gamma_f"]
        names += [f"gamma_hm[{m + 1}]" for m in range(M)]
        names += [f"gamma_fm[{m + 1}]" for m in range(M)]
    names += ["nu_h", "nu_f"]
    return names


def mh_step_consensus_range(cs: ChainState, rng, tuner: MHTuner, period: str) -> None:
    """One MH update of ``gamma_H`` (period ``"h"``) or ``gamma_F``."""
    attr, cov_attr = ("gamma_h", "sigma_h") if period == "h" else ("gamma_f", "sigma_f")
    current_lp = log_target_gamma_consensus(cs, period, getattr(cs.cov, cov_attr))

    def target(value):
        term = SpatialTerm.whittle(cs.data.grid, value)
        return log_target_gamma_consensus(cs, period, term), term

    value, term = _mh_log_step(rng, tuner, attr, getattr(cs.params, attr), current_lp, target, cs.priors.range_upper)
    if term is not None:
        setattr(cs.params, attr, value)
        setattr(cs.cov, cov_attr, term)


def mh_step_run_range(cs: ChainState, rng, tuner: MHTuner, period: str, m: int) -> None:
    """One MH update of ``gamma_Hm`` or ``gamma_Fm`` (``m`` is zero-based)."""
    attr, cov_attr = ("gamma_hm", "sigma_hm") if period == "h" else ("gamma_fm", "sigma_fm")
    values, terms = getattr(cs.params, attr), getattr(cs.cov, cov_attr)
    current_lp = log_target_gamma_run(cs, period, m, terms[m])

    def target(value):
        term = SpatialTerm.whittle(cs.data.grid, value)
        return log_target_gamma_run(cs, period, m, term), term

    value, term = _mh_log_step(rng, tuner, f"{attr}[{m + 1}]", values[m], current_lp, target, cs.priors.range_upper)
    if term is not None:
        values[m] = value
        terms[m] = term


def mh_step_shape(cs: ChainState, rng, tuner: MHTuner, period: str) -> None:
    """One MH update of ``nu_H`` or ``nu_F``."""
    attr = "nu_h" if period == "h" else "nu_f"
    current = getattr(cs.params, attr)

    def target(value):
        return log_target_nu(cs, period, value), None

    value, moved = _mh_log_step(rng, tuner, attr, current, log_target_nu(cs, period, current), target)
    if moved is not None:
        setattr(cs.params, attr, value)


def update_ranges_mh(cs: ChainState, rng: np.random.Generator, tuner: MHTuner) -> None:
    if not cs.variant.spatial:
        return
    for period in ("h", "f"):
        mh_step_consensus_range(cs, rng, tuner, period)
    for period in ("h", "f"):
        for m in range(cs.M):
            mh_step_run_range(cs, rng, tuner, period, m)


def update_shapes_mh(cs: ChainState, rng: np.random.Generator, tuner: MHTuner) -> None:
    for period in ("h", "f"):
        mh_step_shape(cs, rng, tuner, period)


# ---------------------------------------------------------------- driver

_UPDATES = (
    ("expected-and-actual", update_expected_and_actual),
    ("model-means", update_model_means),
    ("consensus", update_consensus),
    ("conjugate-scales", update_conjugate_scales),
    ("v", update_v),
    ("beta", update_beta),
)


def sweep(cs: ChainState, rng: np.random.Generator, tuner: MHTuner, iteration: int = 0) -> None:
    """One full Gibbs/MH sweep in the fixed update order."""
    name = ""
    try:
        for name, update in _UPDATES:
            update(cs, rng)
        name = "ranges-mh"
        update_ranges_mh(cs, rng, tuner)
        name = "shapes-mh"
        update_shapes_mh(cs, rng, tuner)
    except (NotPositiveDefinite, np.linalg.LinAlgError) as exc:
        raise SamplerError(f"sampler: iteration {iteration}, update {name}: {exc}") from exc


def _empirical_precision(values: np.ndarray, floor: float = 1e-6) -> float:
    return 1.0 / max(float(values), floor)


def _within_variance(runs: np.ndarray) -> float | None:
    if runs.shape[0] < 2:
        return None
    return float(np.var(runs, axis=0, ddof=1).mean())


def _run_precisions(runs_list) -> np.ndarray:
    within = [_within_variance(r) for r in runs_list]
    known = [w for w in within if w is not None]
    means = np.stack([r.mean(axis=0) for r in runs_list], axis=1)
    if known:
        pooled = float(np.mean(known))
    elif means.shape[1] > 1:
        pooled = float(np.var(means, axis=1, ddof=1).mean())
    else:
        pooled = 1.0
    return np.array([_empirical_precision(pooled if w is None else w) for w in within])


def initialize_state(
    data: EnsembleDataset, config: ChainConfig | None = None, priors: PriorConfig | None = None
) -> tuple[LatentState, HyperParams]:
    """Data-driven starting point: run means for the fields, inverse variances for precisions.

    Variances are floored at 1e-6, so no starting precision exceeds 1e6.
    Models with a single run borrow the pooled within-model variance.
    """
    kappa = config.kappa if config is not None else 1.0
    priors = priors or PriorConfig()
    M = data.M
    x_h = np.stack([r.mean(axis=0) for r in data.runs_h], axis=1)
    x_f = np.stack([r.mean(axis=0) for r in data.runs_f], axis=1)
    all_h = np.concatenate(data.runs_h, axis=0)
    all_f = np.concatenate(data.runs_f, axis=0)
    mu_h = all_h.mean(axis=0)
    mu_f = all_f.mean(axis=0)
    latent = LatentState(
        mu_h=mu_h.copy(), mu_f=mu_f.copy(), x_h=x_h, x_f=x_f,
        y_h=mu_h.copy(), y_f=mu_f.copy(), y_ha=mu_h.copy(), y_fa=mu_f.copy(),
    )
    phi_hm = _run_precisions(data.runs_h)
    phi_fm = _run_precisions(data.runs_f)
    between_h = float(np.var(x_h, axis=1, ddof=1).mean()) if M > 1 else 1.0
    dev_f = x_f - mu_f[:, None] - (x_h - mu_h[:, None])
    between_f = float(np.var(dev_f, axis=1, ddof=1).mean()) if M > 1 else 1.0
    if data.N > 1:
        obs_var = float(np.var(data.obs, axis=0, ddof=1).mean())
    else:
        obs_var = float(np.mean((data.obs[0] - mu_h) ** 2))
    diameter = data.grid.diameter
    gamma0 = min(0.5 * diameter, priors.range_upper) if diameter > 0 else min(1.0, priors.range_upper)
    params = HyperParams(
        beta=1.0,
        tau_h=_empirical_precision(between_h),
        tau_f=_empirical_precision(between_f),
        gamma_h=gamma0,
        gamma_f=gamma0,
        v=np.eye(M),
        phi_hm=phi_hm,
        phi_fm=phi_fm,
        gamma_hm=np.full(M, gamma0),
        gamma_fm=np.full(M, gamma0),
        nu_h=10.0,
        nu_f=10.0,
        phi_h=float(phi_hm.mean()),
        phi_f=float(phi_fm.mean()),
        phi_ha=float(phi_hm.mean()),
        phi_fa=float(phi_fm.mean()),
        tau_w=_empirical_precision(obs_var),
        kappa=kappa,
    )
    return latent, params


def _snapshot(cs: ChainState) -> dict:
    s, p = cs.latent, cs.params
    out = {}
    for name in STORED_FIELDS:
        value = getattr(s, name) if name in _LATENT_FIELDS else getattr(p, name)
        out[name] = np.array(value, dtype=float, copy=True)
    return out


def iterate_chain(
    data: EnsembleDataset,
    config: ChainConfig,
    priors: PriorConfig | None = None,
    start: tuple[LatentState, HyperParams] | None = None,
    mutations=(),
):
    """Yield ``(iteration, state, tuner)`` after every sweep (iterations count from 1).

    Adaptation runs through ``burn_in`` and is frozen afterwards.
    """
    priors = priors or PriorConfig()
    rng = np.random.default_rng(config.seed)
    latent, params = start if start is not None else initialize_state(data, config, priors)
    latent, params = latent.copy(), params.copy()
    params.kappa = config.kappa
    cs = ChainState(data, latent, params, config.variant, priors, config.chi_scheme, config.v_update, mutations)
    tuner = MHTuner(mh_parameter_names(cs.variant, data.M), config.mh_initial_step, config.adapt_target, config.adapt_window)
    if config.burn_in == 0:
        tuner.freeze()
    for t in range(1, config.iterations + 1):
        sweep(cs, rng, tuner, t)
        if t <= config.burn_in:
            tuner.end_iteration(t)
            if t == config.burn_in:
                tuner.freeze()
        yield t, cs, tuner


def run_chain(
    data: EnsembleDataset,
    config: ChainConfig,
    priors: PriorConfig | None = None,
    start: tuple[LatentState, HyperParams] | None = None,
    mutations=(),
) -> ChainOutput:
    """Run one chain and keep every ``thin``-th post-burn-in state."""
    started = time.perf_counter()
    stored: dict[str, list] = {name: [] for name in STORED_FIELDS}
    tuner = None
    for t, cs, tuner in iterate_chain(data, config, priors, start, mutations):
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0:
            for name, value in _snapshot(cs).items():
                stored[name].append(value)
    draws = {name: np.asarray(values, dtype=float) for name, values in stored.items()}
    return ChainOutput(
        draws=draws,
        acceptance=tuner.rates() if tuner is not None else {},
        config=config.to_dict(),
        seed=config.seed,
        model_names=list(data.model_names),
        sites=np.array(data.grid.sites),
        variant=config.variant.value,
        metric=data.grid.metric,
        wall_time=time.perf_counter() - started,
    )
