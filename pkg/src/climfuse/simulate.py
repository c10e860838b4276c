"""Forward simulation of synthetic ensembles from the full hierarchy.

Generation runs top-down: run precisions, model means, runs and expected
climate, actual climate, observations.  :func:`draw_latent` and
:func:`draw_data` are split so the getting-it-right test can regenerate data
from a sampler's current state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .covariance import Grid
from .model import (
    EnsembleDataset,
    HyperParams,
    LatentState,
    ModelVariant,
    PriorConfig,
    SpatialTerm,
    build_variant_covariances,
    draw_constrained_v,
)

__all__ = [
    "SimulationDesign",
    "generate",
    "draw_latent",
    "draw_data",
    "draw_from_prior",
    "paper_design",
    "cmip5_sized_design",
    "desk_design",
    "desk_cmip5_design",
    "load_design",
    "STUDY_TRUTH",
]

# true parameter values of the reference simulation study
STUDY_TRUTH = dict(
    gamma_h=0.5, gamma_f=0.5, tau_h=1.5, tau_f=2.0, tau_w=2.0, beta=2.0,
    phi_h=10.0, phi_f=10.0, nu_h=100.0, nu_f=100.0, phi_ha=10.0, phi_fa=10.0,
)


@dataclass(eq=False)
class SimulationDesign:
    """Everything needed to generate one synthetic dataset.

    ``truth.phi_hm``/``truth.phi_fm`` are redrawn from their Gamma laws on
    every call to :func:`generate` unless ``draw_run_precisions`` is False.
    """

    grid_size: int
    runs_h: np.ndarray
    runs_f: np.ndarray
    n_obs: int
    truth: HyperParams
    mu_h: np.ndarray
    mu_f: np.ndarray
    seed: int = 0
    model_names: list | None = None
    draw_run_precisions: bool = True
    name: str = "custom"
    extent: tuple = field(default=(0.0, 1.0))

    def __post_init__(self):
        self.runs_h = np.asarray(self.runs_h, dtype=int)
        self.runs_f = np.asarray(self.runs_f, dtype=int)
        self.mu_h = np.asarray(self.mu_h, dtype=float)
        self.mu_f = np.asarray(self.mu_f, dtype=float)
        n = self.grid_size**2
        M = self.truth.M
        if self.grid_size < 1 or self.n_obs < 1:
            raise ValueError("grid_size and n_obs must be >= 1")
        if self.runs_h.shape != (M,) or self.runs_f.shape != (M,) or self.runs_h.min() < 1 or self.runs_f.min() < 1:
            raise ValueError(f"run counts must be {M} integers >= 1")
        if self.mu_h.shape != (n,) or self.mu_f.shape != (n,):
            raise ValueError(f"consensus fields must have length {n}")
        if self.model_names is None:
            self.model_names = [f"model{m + 1}" for m in range(M)]
        if len(self.model_names) != M:
            raise ValueError("model_names length must equal M")
        self.truth.check()

    @property
    def M(self) -> int:
        return self.truth.M

    @property
    def n(self) -> int:
        return self.grid_size**2

    def grid(self) -> Grid:
        return Grid.regular(self.grid_size, *self.extent)

    def with_seed(self, seed: int) -> "SimulationDesign":
        return replace(self, seed=seed)


def _lower(term: SpatialTerm) -> np.ndarray:
    return np.eye(term.matrix.shape[0]) if term.factor is None else term.factor.lower


def draw_latent(
    grid: Grid,
    params: HyperParams,
    mu_h: np.ndarray,
    mu_f: np.ndarray,
    rng: np.random.Generator,
    variant: ModelVariant = ModelVariant.FULL,
) -> LatentState:
    """Model means, expected and actual climate given parameters and consensus."""
    cov = build_variant_covariances(params, variant, grid)
    n, M = grid.n, params.M
    lh, lf = _lower(cov.sigma_h), _lower(cov.sigma_f)
    lv = np.linalg.cholesky(cov.v)
    e_h = lh @ rng.standard_normal((n, M)) @ lv.T / np.sqrt(params.tau_h)
    e_f = lf @ rng.standard_normal((n, M)) @ lv.T / np.sqrt(params.tau_f)
    x_h = mu_h[:, None] + e_h
    x_f = mu_f[:, None] + e_f + params.beta * e_h
    k = params.kappa
    y_h = mu_h + lh @ rng.standard_normal(n) * np.sqrt(k / params.tau_h)
    y_f = mu_f + params.beta * (y_h - mu_h) + lf @ rng.standard_normal(n) * np.sqrt(k / params.tau_f)
    y_ha = y_h + rng.standard_normal(n) / np.sqrt(params.phi_ha)
    y_fa = y_f + rng.standard_normal(n) / np.sqrt(params.phi_fa)
    return LatentState(
        mu_h=np.array(mu_h, dtype=float), mu_f=np.array(mu_f, dtype=float),
        x_h=x_h, x_f=x_f, y_h=y_h, y_f=y_f, y_ha=y_ha, y_fa=y_fa,
    )


def draw_data(
    grid: Grid,
    state: LatentState,
    params: HyperParams,
    runs_h,
    runs_f,
    n_obs: int,
    rng: np.random.Generator,
    variant: ModelVariant = ModelVariant.FULL,
    model_names=None,
) -> EnsembleDataset:
    """Runs and observations given the latent state."""
    cov = build_variant_covariances(params, variant, grid)
    n, M = grid.n, params.M
    out_h, out_f = [], []
    for m in range(M):
        lo = _lower(cov.sigma_hm[m])
        z = rng.standard_normal((int(runs_h[m]), n))
        out_h.append(state.x_h[:, m] + z @ lo.T / np.sqrt(params.phi_hm[m]))
    for m in range(M):
        lo = _lower(cov.sigma_fm[m])
        z = rng.standard_normal((int(runs_f[m]), n))
        out_f.append(state.x_f[:, m] + z @ lo.T / np.sqrt(params.phi_fm[m]))
    obs = state.y_ha + rng.standard_normal((n_obs, n)) / np.sqrt(params.tau_w)
    return EnsembleDataset(grid, out_h, out_f, obs, model_names)


def _draw_run_precisions(params: HyperParams, rng: np.random.Generator) -> None:
    M = params.M
    params.phi_hm = rng.gamma(params.nu_h / 2, 2 * params.phi_h / params.nu_h, size=M)
    params.phi_fm = rng.gamma(params.nu_f / 2, 2 * params.phi_f / params.nu_f, size=M)


def generate(design: SimulationDesign, variant: ModelVariant = ModelVariant.FULL):
    """Draw one synthetic dataset.

    Returns ``(data, truth_state, truth_params)``; ``truth_params`` carries
    the realised run precisions.  Deterministic given ``design.seed``.
    """
    rng = np.random.default_rng(design.seed)
    params = design.truth.copy()
    if design.draw_run_precisions:
        _draw_run_precisions(params, rng)
    grid = design.grid()
    state = draw_latent(grid, params, design.mu_h, design.mu_f, rng, variant)
    data = draw_data(grid, state, params, design.runs_h, design.runs_f, design.n_obs, rng, variant, design.model_names)
    return data, state, params


def draw_from_prior(
    priors: PriorConfig,
    n: int,
    M: int,
    rng: np.random.Generator,
    variant: ModelVariant = ModelVariant.FULL,
    kappa: float = 1.0,
) -> tuple[HyperParams, np.ndarray, np.ndarray]:
    """Draw ``(params, mu_h, mu_f)`` from the prior (requires proper priors to be meaningful)."""
    variant = ModelVariant.parse(variant)

    def gamma(prior):
        return rng.gamma(prior[0], 1.0 / prior[1])

    def inv_gamma(prior):
        return 1.0 / rng.gamma(prior[0], 1.0 / prior[1])

    upper = priors.range_upper
    d = priors.v_df_extra
    if variant.model_dependence:
        v = draw_constrained_v(d * priors.v_prior_mean(M), M + d + 1, rng)
    else:
        v = np.eye(M)
    nu_h, nu_f = gamma(priors.nu_prior), gamma(priors.nu_prior)
    phi_h, phi_f = inv_gamma(priors.phi_prior), inv_gamma(priors.phi_prior)
    params = HyperParams(
        beta=rng.normal(0.0, np.sqrt(priors.beta_variance)),
        tau_h=gamma(priors.tau_prior),
        tau_f=gamma(priors.tau_prior),
        gamma_h=rng.uniform(0.0, upper),
        gamma_f=rng.uniform(0.0, upper),
        v=v,
        phi_hm=np.ones(M),
        phi_fm=np.ones(M),
        gamma_hm=rng.uniform(0.0, upper, size=M),
        gamma_fm=rng.uniform(0.0, upper, size=M),
        nu_h=nu_h,
        nu_f=nu_f,
        phi_h=phi_h,
        phi_f=phi_f,
        phi_ha=rng.gamma(nu_h / (2 * kappa), 2 * kappa * phi_h / nu_h),
        phi_fa=rng.gamma(nu_f / (2 * kappa), 2 * kappa * phi_f / nu_f),
        tau_w=gamma(priors.tau_w_prior),
        kappa=kappa,
    )
    _draw_run_precisions(params, rng)
    sd = np.sqrt(priors.mu_variance)
    return params, rng.normal(0.0, sd, n), rng.normal(0.0, sd, n)


def _read_fixture(name: str) -> dict:
    return json.loads(resources.files("climfuse.data").joinpath(f"{name}.json").read_text())


def design_from_dict(payload: dict, seed: int = 0, runs_key: str = "runs", obs_key: str = "n_obs") -> SimulationDesign:
    """Build a design from a fixture-format mapping (400-site study truth unless overridden)."""
    M = len(payload["model_names"])
    values = dict(STUDY_TRUTH)
    values.update(payload.get("truth", {}))
    if runs_key == "runs":
        runs_h, runs_f = payload["runs_h"], payload["runs_f"]
    else:
        runs_h = runs_f = payload[runs_key]
    truth = HyperParams(
        v=np.asarray(payload["v"], dtype=float),
        phi_hm=np.full(M, values["phi_h"]),
        phi_fm=np.full(M, values["phi_f"]),
        gamma_hm=payload["gamma_hm"],
        gamma_fm=payload["gamma_fm"],
        kappa=values.pop("kappa", 1.0),
        **values,
    )
    return SimulationDesign(
        grid_size=int(payload["grid_size"]),
        runs_h=runs_h,
        runs_f=runs_f,
        n_obs=int(payload[obs_key]),
        truth=truth,
        mu_h=payload["mu_h"],
        mu_f=payload["mu_f"],
        seed=seed,
        model_names=list(payload["model_names"]),
        name=str(payload.get("name", "custom")),
    )


def paper_design(seed: int = 0) -> SimulationDesign:
    """20 x 20 grid, 38 models with 10 runs per period, 5 observation sets."""
    return design_from_dict(_read_fixture("paper"), seed)


def cmip5_sized_design(seed: int = 0) -> SimulationDesign:
    """The 38-model design with the CMIP5 run counts (81 runs in total) and 2 observation sets."""
    design = design_from_dict(_read_fixture("paper"), seed, runs_key="cmip5_runs", obs_key="cmip5_n_obs")
    design.name = "cmip5"
    return design


def desk_design(seed: int = 0) -> SimulationDesign:
    """Reduced design: 8 x 8 grid, 6 models with 3 runs each, 3 observation sets."""
    return design_from_dict(_read_fixture("desk"), seed)


def desk_cmip5_design(seed: int = 0) -> SimulationDesign:
    """8 x 8 grid, the first ten CMIP5 models with their run counts, 2 observation sets."""
    return design_from_dict(_read_fixture("desk_cmip5"), seed)


def load_design(path, seed: int = 0) -> SimulationDesign:
    """Design from a JSON file in the bundled fixture format."""
    with open(path) as fh:
        payload = json.load(fh)
    required = {"grid_size", "n_obs", "model_names", "runs_h", "runs_f", "mu_h", "mu_f", "v", "gamma_hm", "gamma_fm"}
    missing = sorted(required - set(payload))
    if missing:
        raise ValueError(f"design file lacks keys: {', '.join(missing)}")
    return design_from_dict(payload, seed)
