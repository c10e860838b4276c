"""Posterior summaries and the comparison quantities built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EnsembleDataset, LatentState
from .sampler import ChainOutput

__all__ = [
    "TooFewDraws",
    "FieldSummary",
    "PosteriorSummary",
    "CoverageResult",
    "QUANTILE_LEVELS",
    "summarize",
    "multi_model_mean",
    "quantile_of_value",
    "region_mean_ci",
    "correlation_from_v",
    "coverage_score",
]

QUANTILE_LEVELS = (0.05, 0.5, 0.95, 0.99)


class TooFewDraws(ValueError):
    """Raised when a chain holds fewer draws than a summary requires."""


@dataclass
class FieldSummary:
    """Per-site posterior statistics of one field."""

    mean: np.ndarray
    sd: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    q99: np.ndarray

    @classmethod
    def from_draws(cls, draws: np.ndarray) -> "FieldSummary":
        q = np.quantile(draws, QUANTILE_LEVELS, axis=0, method="linear")
        sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1:])
        return cls(draws.mean(axis=0), sd, *q)

    def as_columns(self) -> dict:
        return {k: getattr(self, k) for k in ("mean", "sd", "q05", "q50", "q95", "q99")}


@dataclass
class PosteriorSummary:
    y_h: FieldSummary
    y_f: FieldSummary
    v_mean: np.ndarray
    correlation: np.ndarray
    beta: FieldSummary
    region_mean_h: np.ndarray
    region_mean_f: np.ndarray


@dataclass
class CoverageResult:
    counts: np.ndarray
    replicates: int

    @property
    def rate(self) -> float:
        return float(self.counts.sum() / (self.counts.size * self.replicates))


def _require(chain: ChainOutput, minimum: int = 2) -> None:
    if chain.n_draws < minimum:
        raise TooFewDraws(f"need at least {minimum} stored draws, chain has {chain.n_draws}")


def _normalise(v: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.diag(v))
    corr = v * np.outer(scale, scale)
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def summarize(chain: ChainOutput) -> PosteriorSummary:
    """Means, standard deviations and linear-interpolation quantiles of the stored draws."""
    _require(chain)
    v_mean = chain["v"].mean(axis=0)
    return PosteriorSummary(
        y_h=FieldSummary.from_draws(chain["y_h"]),
        y_f=FieldSummary.from_draws(chain["y_f"]),
        v_mean=v_mean,
        correlation=_normalise(v_mean),
        beta=FieldSummary.from_draws(chain["beta"][:, None]),
        region_mean_h=chain["y_h"].mean(axis=1),
        region_mean_f=chain["y_f"].mean(axis=1),
    )


def multi_model_mean(data: EnsembleDataset) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted average over every run of every model, per period."""
    return np.concatenate(data.runs_h).mean(axis=0), np.concatenate(data.runs_f).mean(axis=0)


def quantile_of_value(chain: ChainOutput, reference: np.ndarray, field: str = "y_f") -> np.ndarray:
    """Posterior probability at or below ``reference`` per site; ties count one half."""
    draws = chain[field]
    reference = np.asarray(reference, dtype=float)
    if reference.shape != draws.shape[1:]:
        raise ValueError(f"reference must have shape {draws.shape[1:]}")
    below = (draws < reference).sum(axis=0)
    ties = (draws == reference).sum(axis=0)
    return (below + 0.5 * ties) / draws.shape[0]


def region_mean_ci(chain: ChainOutput, level: float = 0.90, field: str = "y_f", sites=None) -> tuple[float, float, float]:
    """Mean and equal-tailed interval of the spatial average, computed draw by draw."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    _require(chain, 1)
    draws = chain[field] if sites is None else chain[field][:, np.asarray(sites)]
    region = draws.mean(axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(region, [tail, 1 - tail], method="linear")
    mean = float(region.mean())
    # guard against rounding when every draw is identical
    return mean, float(min(lo, mean)), float(max(hi, mean))


def correlation_from_v(chain: ChainOutput, threshold: float = 0.7, per_draw: bool = False):
    """Correlation matrix implied by ``V`` and the model pairs above ``threshold``.

    By default the posterior-mean ``V`` is normalised; ``per_draw=True``
    averages the per-draw correlation matrices instead.
    """
    _require(chain, 1)
    v = chain["v"]
    if per_draw:
        corr = np.mean([_normalise(x) for x in v], axis=0)
    else:
        corr = _normalise(v.mean(axis=0))
    names = chain.model_names
    pairs = [
        (names[i], names[j], float(corr[i, j]))
        for i in range(corr.shape[0])
        for j in range(i + 1, corr.shape[0])
        if corr[i, j] > threshold
    ]
    pairs.sort(key=lambda p: -p[2])
    return corr, pairs


def coverage_score(replicates, level: float = 0.90, field: str = "y_f") -> CoverageResult:
    """Per-site count of replicates whose truth lies inside the central credible interval."""
    replicates = list(replicates)
    if len(replicates) < 2:
        raise ValueError("coverage needs at least two replicates")
    tail = (1 - level) / 2
    counts = None
    for chain, truth in replicates:
        value = getattr(truth, field) if isinstance(truth, LatentState) else np.asarray(truth, dtype=float)
        lo, hi = np.quantile(chain[field], [tail, 1 - tail], axis=0, method="linear")
        hit = ((value >= lo) & (value <= hi)).astype(int)
        counts = hit if counts is None else counts + hit
    return CoverageResult(counts, len(replicates))
