"""Data, latent state and parameter containers plus the joint log-posterior.

The hierarchy, top to bottom:

* model means  ``X_Hm = mu_H + e_Hm``, ``X_Fm = mu_F + e_Fm + beta (X_Hm - mu_H)``
  with ``cov(e_p(s), e_q(s')) = tau^{-1} c(|s - s'|; gamma) V[p, q]``;
* runs ``X_Hmr = X_Hm + e_Hmr`` with covariance ``phi_Hm^{-1} c(.; gamma_Hm)``
  and ``phi_Hm ~ Ga(nu_H/2, nu_H/(2 phi_H))``;
* expected climate ``Y_H``, ``Y_F``: same form as a model mean but with
  covariance ``kappa tau^{-1} c(.; gamma)`` and no ``V``;
* actual climate ``Y_a ~ N(Y, phi_a^{-1} I)`` with
  ``phi_Ha ~ Ga(nu_H/(2 kappa), nu_H/(2 kappa phi_H))``;
* observations ``W_i ~ N(Y_Ha, tau_W^{-1} I)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import gammaln
from scipy.stats import invwishart

from .covariance import (
    RANGE_UPPER,
    FactoredMatrix,
    Grid,
    build_correlation,
    factor,
    sample_gaussian_precision,
)

__all__ = [
    "ModelVariant",
    "EnsembleDataset",
    "LatentState",
    "HyperParams",
    "PriorConfig",
    "SpatialTerm",
    "CovarianceBundle",
    "build_variant_covariances",
    "partition_coefficients",
    "draw_constrained_v",
    "log_joint_density",
    "chi_layer_log_density",
]


class ModelVariant(str, Enum):
    """Which covariance components the fitted model keeps."""

    FULL = "full"
    NO_MODEL_DEPENDENCE = "no-v"
    NO_SPATIAL_MEANS = "no-spatial"
    SIMPLEST = "simplest"

    @property
    def spatial(self) -> bool:
        return self in (ModelVariant.FULL, ModelVariant.NO_MODEL_DEPENDENCE)

    @property
    def model_dependence(self) -> bool:
        return self in (ModelVariant.FULL, ModelVariant.NO_SPATIAL_MEANS)

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        aliases = {
            "nomodeldependence": cls.NO_MODEL_DEPENDENCE,
            "nospatialmeans": cls.NO_SPATIAL_MEANS,
        }
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


def _as_runs(runs, n: int, label: str) -> list[np.ndarray]:
    out = []
    for m, r in enumerate(runs):
        arr = np.atleast_2d(np.asarray(r, dtype=float))
        if arr.shape[1] != n or arr.shape[0] < 1:
            raise ValueError(f"{label} runs of model {m + 1} must have shape (R>=1, {n}), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{label} runs of model {m + 1} contain non-finite values")
        out.append(arr)
    return out


@dataclass(eq=False)
class EnsembleDataset:
    """Model runs for both periods plus the observation fields.

    ``runs_h[m]`` is an ``(R_Hm, n)`` array of historical runs for model ``m``;
    ``obs`` is ``(N, n)``.
    """

    grid: Grid
    runs_h: list
    runs_f: list
    obs: np.ndarray
    model_names: list = None

    def __post_init__(self):
        n = self.grid.n
        if len(self.runs_h) < 1 or len(self.runs_h) != len(self.runs_f):
            raise ValueError("need the same number (>= 1) of models in both periods")
        self.runs_h = _as_runs(self.runs_h, n, "historical")
        self.runs_f = _as_runs(self.runs_f, n, "future")
        obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        if obs.shape[1] != n or obs.shape[0] < 1:
            raise ValueError(f"observations must have shape (N>=1, {n}), got {obs.shape}")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations contain non-finite values")
        self.obs = obs
        if self.model_names is None:
            self.model_names = [f"model{m + 1}" for m in range(self.M)]
        if len(self.model_names) != self.M:
            raise ValueError("model_names length must equal the number of models")
        self.model_names = [str(s) for s in self.model_names]

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def M(self) -> int:
        return len(self.runs_h)

    @property
    def N(self) -> int:
        return self.obs.shape[0]

    @property
    def run_counts_h(self) -> np.ndarray:
        return np.array([r.shape[0] for r in self.runs_h])

    @property
    def run_counts_f(self) -> np.ndarray:
        return np.array([r.shape[0] for r in self.runs_f])

    def permuted(self, order) -> "EnsembleDataset":
        order = np.asarray(order)
        return EnsembleDataset(
            self.grid.permuted(order),
            [r[:, order] for r in self.runs_h],
            [r[:, order] for r in self.runs_f],
            self.obs[:, order],
            list(self.model_names),
        )


@dataclass(eq=False)
class LatentState:
    """Consensus fields, model means (``n x M``), expected and actual climate."""

    mu_h: np.ndarray
    mu_f: np.ndarray
    x_h: np.ndarray
    x_f: np.ndarray
    y_h: np.ndarray
    y_f: np.ndarray
    y_ha: np.ndarray
    y_fa: np.ndarray

    def copy(self) -> "LatentState":
        return copy.deepcopy(self)

    def check(self, n: int, M: int) -> None:
        for name in ("mu_h", "mu_f", "y_h", "y_f", "y_ha", "y_fa"):
            v = getattr(self, name)
            if v.shape != (n,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite vector of length {n}")
        for name in ("x_h", "x_f"):
            v = getattr(self, name)
            if v.shape != (n, M) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite ({n}, {M}) matrix")

    def permuted(self, order) -> "LatentState":
        order = np.asarray(order)
        return LatentState(
            self.mu_h[order], self.mu_f[order], self.x_h[order], self.x_f[order],
            self.y_h[order], self.y_f[order], self.y_ha[order], self.y_fa[order],
        )


@dataclass(eq=False)
class HyperParams:
    """Every non-field parameter of the hierarchy.

    ``v`` is the M x M inter-model dependence matrix with ``v[0, 0] == 1``;
    ``kappa`` is a fixed constant and never sampled.
    """

    beta: float
    tau_h: float
    tau_f: float
    gamma_h: float
    gamma_f: float
    v: np.ndarray
    phi_hm: np.ndarray
    phi_fm: np.ndarray
    gamma_hm: np.ndarray
    gamma_fm: np.ndarray
    nu_h: float
    nu_f: float
    phi_h: float
    phi_f: float
    phi_ha: float
    phi_fa: float
    tau_w: float
    kappa: float = 1.0

    def __post_init__(self):
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        for name in ("phi_hm", "phi_fm", "gamma_hm", "gamma_fm"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def M(self) -> int:
        return self.v.shape[0]

    def copy(self) -> "HyperParams":
        return copy.deepcopy(self)

    def support_violations(self, range_upper: float = RANGE_UPPER) -> list[str]:
        """Names of parameters outside their prior support (empty if valid)."""
        bad = []
        for name in ("tau_h", "tau_f", "nu_h", "nu_f", "phi_h", "phi_f", "phi_ha", "phi_fa", "tau_w", "kappa"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                bad.append(name)
        if not np.isfinite(self.beta):
            bad.append("beta")
        for name in ("gamma_h", "gamma_f"):
            value = getattr(self, name)
            if not (0 < value <= range_upper):
                bad.append(name)
        for name in ("gamma_hm", "gamma_fm"):
            value = getattr(self, name)
            if value.shape != (self.M,) or not np.all((value > 0) & (value <= range_upper)):
                bad.append(name)
        for name in ("phi_hm", "phi_fm"):
            value = getattr(self, name)
            if value.shape != (self.M,) or not np.all(np.isfinite(value) & (value > 0)):
                bad.append(name)
        v = self.v
        if v.shape != (self.M, self.M) or not np.allclose(v, v.T, rtol=0, atol=1e-12) or abs(v[0, 0] - 1.0) > 1e-12:
            bad.append("v")
        elif np.linalg.eigvalsh(0.5 * (v + v.T)).min() <= 0:
            bad.append("v")
        return bad

    def check(self, range_upper: float = RANGE_UPPER) -> None:
        bad = self.support_violations(range_upper)
        if bad:
            raise ValueError(f"parameters outside support: {', '.join(bad)}")


@dataclass
class PriorConfig:
    """Prior hyperconstants; the defaults are deliberately vague.

    Gamma priors are ``(shape, rate)``; the inverse-gamma prior on
    ``phi_H, phi_F`` is ``(shape, scale)``.  ``v_tilde`` defaults to the
    identity and ``v_df_extra`` is the integer ``d`` in ``IW(d V~, M + d + 1)``.
    """

    mu_variance: float = 1e6
    beta_variance: float = 1e6
    tau_prior: tuple = (1e-3, 1e-3)
    tau_w_prior: tuple = (1e-3, 1e-3)
    nu_prior: tuple = (1e-3, 1e-3)
    phi_prior: tuple = (1e-3, 1e-3)
    range_upper: float = RANGE_UPPER
    v_tilde: np.ndarray | None = None
    v_df_extra: int = 1

    def __post_init__(self):
        for name in ("tau_prior", "tau_w_prior", "nu_prior", "phi_prior"):
            pair = tuple(float(x) for x in getattr(self, name))
            if len(pair) != 2 or min(pair) <= 0:
                raise ValueError(f"{name} must be two positive numbers")
            setattr(self, name, pair)
        if self.mu_variance <= 0 or self.beta_variance <= 0 or self.range_upper <= 0:
            raise ValueError("prior variances and range_upper must be positive")
        if int(self.v_df_extra) != self.v_df_extra or self.v_df_extra < 1:
            raise ValueError("v_df_extra must be a positive integer")
        self.v_df_extra = int(self.v_df_extra)
        if self.v_tilde is not None:
            vt = np.atleast_2d(np.asarray(self.v_tilde, dtype=float))
            if not np.allclose(vt, vt.T) or np.linalg.eigvalsh(vt).min() <= 0:
                raise ValueError("v_tilde must be symmetric positive definite")
            self.v_tilde = vt

    def v_prior_mean(self, M: int) -> np.ndarray:
        if self.v_tilde is None:
            return np.eye(M)
        if self.v_tilde.shape != (M, M):
            raise ValueError(f"v_tilde has shape {self.v_tilde.shape}, expected ({M}, {M})")
        return self.v_tilde


class SpatialTerm:
    """A correlation matrix together with its factor, inverse and log-determinant."""

    __slots__ = ("gamma", "matrix", "factor", "inv", "logdet")

    def __init__(self, gamma, matrix: np.ndarray, fac: FactoredMatrix | None):
        self.gamma = gamma
        self.matrix = matrix
        self.factor = fac
        if fac is None:
            self.inv = np.eye(matrix.shape[0])
            self.logdet = 0.0
        else:
            self.inv = fac.inverse()
            self.logdet = fac.log_det()

    @classmethod
    def whittle(cls, grid: Grid, gamma: float) -> "SpatialTerm":
        corr = build_correlation(grid, gamma)
        return cls(gamma, corr, factor(corr))

    @classmethod
    def identity(cls, n: int) -> "SpatialTerm":
        return cls(None, np.eye(n), None)

    def qf(self, x: np.ndarray) -> float:
        """``x^T S^{-1} x`` for a vector, or the trace sum over columns of a matrix."""
        return float(np.sum(x * (self.inv @ x)))


@dataclass
class CovarianceBundle:
    """Spatial matrices of one variant: consensus layers and per-model run layers."""

    sigma_h: SpatialTerm
    sigma_f: SpatialTerm
    sigma_hm: list = field(default_factory=list)
    sigma_fm: list = field(default_factory=list)
    v: np.ndarray | None = None


def build_variant_covariances(params: HyperParams, variant: ModelVariant, grid: Grid) -> CovarianceBundle:
    """Covariance pieces for ``variant``.

    Non-spatial variants get identity matrices in every spatial slot; variants
    without model dependence get ``V = I``.
    """
    variant = ModelVariant.parse(variant)
    n, M = grid.n, params.M
    if variant.spatial:
        sh = SpatialTerm.whittle(grid, params.gamma_h)
        sf = SpatialTerm.whittle(grid, params.gamma_f)
        shm = [SpatialTerm.whittle(grid, g) for g in params.gamma_hm]
        sfm = [SpatialTerm.whittle(grid, g) for g in params.gamma_fm]
    else:
        ident = SpatialTerm.identity(n)
        sh = sf = ident
        shm = [ident] * M
        sfm = [ident] * M
    v = params.v if variant.model_dependence else np.eye(M)
    return CovarianceBundle(sh, sf, shm, sfm, v)


def partition_coefficients(v: np.ndarray, m: int, given) -> tuple[np.ndarray, float]:
    """Regression weights and residual variance of column ``m`` on columns ``given``.

    Returns ``a = V[m, given] V[given, given]^{-1}`` and
    ``s = V[m, m] - a V[given, m]``.  An empty ``given`` yields ``(a=[], s=V[m, m])``.
    """
    given = np.asarray(given, dtype=int)
    if given.size == 0:
        return np.zeros(0), float(v[m, m])
    vgg = v[np.ix_(given, given)]
    vmg = v[m, given]
    a = np.linalg.solve(vgg, vmg)
    return a, float(v[m, m] - a @ vmg)


def draw_constrained_v(psi: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``V ~ IW(psi, df)`` conditioned on ``V[0, 0] = 1``.

    Under the inverse-Wishart law the corner ``V[0, 0]`` is independent of
    ``B = V[0, 1:] / V[0, 0]`` and of the Schur complement ``S``, with
    ``S ~ IW(psi_22.1, df)`` and ``B | S ~ N(psi_12 / psi_11, S / psi_11)``.
    Conditioning on the corner therefore leaves those two draws unchanged.
    """
    psi = 0.5 * (psi + psi.T)
    M = psi.shape[0]
    if M == 1:
        return np.ones((1, 1))
    p11 = psi[0, 0]
    p12 = psi[0, 1:]
    schur = psi[1:, 1:] - np.outer(p12, p12) / p11
    S = np.atleast_2d(invwishart.rvs(df=df, scale=schur, random_state=rng))
    prec = p11 * factor(S).inverse()
    b = sample_gaussian_precision(prec @ (p12 / p11), prec, rng)
    v = np.empty((M, M))
    v[0, 0] = 1.0
    v[0, 1:] = b
    v[1:, 0] = b
    v[1:, 1:] = S + np.outer(b, b)
    return v


def chi_layer_log_density(dev: np.ndarray, v: np.ndarray, sigma: SpatialTerm, tau: float) -> float:
    """log N(vec(dev); 0, tau^{-1} V kron Sigma) without the 2 pi constant.

    ``dev`` is ``n x M``; uses the matrix-normal identities
    ``|V kron S| = |V|^n |S|^M`` and the trace form of the quadratic.
    """
    n, M = dev.shape
    vf = factor(v)
    vinv = vf.inverse()
    quad = float(np.sum((sigma.inv @ dev @ vinv) * dev))
    return 0.5 * M * n * np.log(tau) - 0.5 * n * vf.log_det() - 0.5 * M * sigma.logdet - 0.5 * tau * quad


def _log_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def _gamma_kernel(x, prior):
    a, b = prior
    return (a - 1.0) * np.log(x) - b * x


def _inv_gamma_kernel(x, prior):
    a, b = prior
    return -(a + 1.0) * np.log(x) - b / x


def _runs_log_likelihood(runs: np.ndarray, mean: np.ndarray, phi: float, sigma: SpatialTerm) -> float:
    resid = (runs - mean).T
    R = runs.shape[0]
    n = runs.shape[1]
    return 0.5 * R * n * np.log(phi) - 0.5 * R * sigma.logdet - 0.5 * phi * sigma.qf(resid)


def log_joint_density(
    data: EnsembleDataset,
    state: LatentState,
    params: HyperParams,
    variant: ModelVariant = ModelVariant.FULL,
    priors: PriorConfig | None = None,
    covariances: CovarianceBundle | None = None,
) -> float:
    """Unnormalised log joint posterior of every latent field and parameter.

    Dropped constants: ``2 pi`` factors and the normalisers of priors whose
    hyperparameters are fixed (gamma/inverse-gamma priors on the top-level
    precisions and shapes, the uniform range priors, the inverse-Wishart prior
    on ``V``).  Everything depending on a sampled quantity is kept, including
    ``Gamma(nu/2)`` terms and determinants, so differences are exact
    log-posterior ratios.

    Returns ``-inf`` for parameters outside the prior support.
    """
    priors = priors or PriorConfig()
    variant = ModelVariant.parse(variant)
    if variant.model_dependence:
        if params.support_violations(priors.range_upper):
            return -np.inf
    else:
        trial = params.copy()
        trial.v = np.eye(params.M)
        if trial.support_violations(priors.range_upper):
            return -np.inf

    n, M, N = data.n, data.M, data.N
    kappa = params.kappa
    cov = covariances or build_variant_covariances(params, variant, data.grid)
    v = cov.v

    total = 0.0
    # runs given model means
    for m in range(M):
        total += _runs_log_likelihood(data.runs_h[m], state.x_h[:, m], params.phi_hm[m], cov.sigma_hm[m])
        total += _runs_log_likelihood(data.runs_f[m], state.x_f[:, m], params.phi_fm[m], cov.sigma_fm[m])

    # observations given actual climate
    resid_w = data.obs - state.y_ha
    total += 0.5 * N * n * np.log(params.tau_w) - 0.5 * params.tau_w * float(np.sum(resid_w**2))

    # model means given consensus
    dev_h = state.x_h - state.mu_h[:, None]
    dev_f = state.x_f - state.mu_f[:, None] - params.beta * dev_h
    total += chi_layer_log_density(dev_h, v, cov.sigma_h, params.tau_h)
    total += chi_layer_log_density(dev_f, v, cov.sigma_f, params.tau_f)

    # expected and actual climate
    d_yh = state.y_h - state.mu_h
    d_yf = state.y_f - state.mu_f - params.beta * d_yh
    total += 0.5 * n * np.log(params.tau_h / kappa) - 0.5 * cov.sigma_h.logdet
    total -= 0.5 * params.tau_h / kappa * cov.sigma_h.qf(d_yh)
    total += 0.5 * n * np.log(params.tau_f / kappa) - 0.5 * cov.sigma_f.logdet
    total -= 0.5 * params.tau_f / kappa * cov.sigma_f.qf(d_yf)
    total += 0.5 * n * np.log(params.phi_ha) - 0.5 * params.phi_ha * float(np.sum((state.y_ha - state.y_h) ** 2))
    total += 0.5 * n * np.log(params.phi_fa) - 0.5 * params.phi_fa * float(np.sum((state.y_fa - state.y_f) ** 2))

    # consensus prior
    total -= 0.5 * (float(state.mu_h @ state.mu_h) + float(state.mu_f @ state.mu_f)) / priors.mu_variance

    # run precisions given their hyperparameters
    total += float(np.sum(_log_gamma_pdf(params.phi_hm, params.nu_h / 2, params.nu_h / (2 * params.phi_h))))
    total += float(np.sum(_log_gamma_pdf(params.phi_fm, params.nu_f / 2, params.nu_f / (2 * params.phi_f))))
    total += _log_gamma_pdf(params.phi_ha, params.nu_h / (2 * kappa), params.nu_h / (2 * kappa * params.phi_h))
    total += _log_gamma_pdf(params.phi_fa, params.nu_f / (2 * kappa), params.nu_f / (2 * kappa * params.phi_f))

    # top-level priors
    total -= 0.5 * params.beta**2 / priors.beta_variance
    total += _gamma_kernel(params.tau_w, priors.tau_w_prior)
    total += _gamma_kernel(params.tau_h, priors.tau_prior) + _gamma_kernel(params.tau_f, priors.tau_prior)
    total += _gamma_kernel(params.nu_h, priors.nu_prior) + _gamma_kernel(params.nu_f, priors.nu_prior)
    total += _inv_gamma_kernel(params.phi_h, priors.phi_prior) + _inv_gamma_kernel(params.phi_f, priors.phi_prior)
    if variant.model_dependence:
        d = priors.v_df_extra
        vf = factor(v)
        total -= (M + 1 + d / 2) * vf.log_det() + 0.5 * d * float(np.trace(vf.solve(priors.v_prior_mean(M))))
    return float(total)
