"""Whittle correlation and the Gaussian linear algebra used everywhere else.

Every Gaussian draw in the package goes through
:func:`sample_gaussian_precision`, so a chain is reproducible from its seed
and update order alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .bessel import bessel_k1

__all__ = [
    "NotPositiveDefinite",
    "Grid",
    "whittle_correlation",
    "build_correlation",
    "FactoredMatrix",
    "factor",
    "sample_gaussian_precision",
    "log_det",
    "quad_form",
    "RANGE_UPPER",
]

RANGE_UPPER = 1e6

_EARTH_RADIUS_KM = 6371.0088
_JITTER_START = 1e-10
_JITTER_CAP = 1e-4


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factored even after the jitter cap."""


def _pairwise(sites: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = sites[:, None, :] - sites[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
    elif metric == "haversine-km":
        lon = np.radians(sites[:, 0])
        lat = np.radians(sites[:, 1])
        dlat = lat[:, None] - lat[None, :]
        dlon = lon[:, None] - lon[None, :]
        h = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
        dist = 2.0 * _EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    else:
        raise ValueError(f"unknown metric {metric!r}; expected 'euclidean' or 'haversine-km'")
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


@dataclass(frozen=True, eq=False)
class Grid:
    """Spatial sites shared by every field, with their pairwise distances.

    ``sites`` is an ``(n, 2)`` array.  Coordinates are plane units for the
    synthetic designs and (lon, lat) degrees for gridded data; with the
    default euclidean metric degrees are treated as planar.
    """

    sites: np.ndarray
    metric: str = "euclidean"
    dist: np.ndarray = field(init=False, repr=False)
    _unique: np.ndarray = field(init=False, repr=False)
    _inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sites = np.array(self.sites, dtype=float)
        if sites.ndim != 2 or sites.shape[1] != 2 or sites.shape[0] < 1:
            raise ValueError("sites must be an (n, 2) array with n >= 1")
        if not np.all(np.isfinite(sites)):
            raise ValueError("site coordinates must be finite")
        sites.setflags(write=False)
        dist = _pairwise(sites, self.metric)
        dist.setflags(write=False)
        # regular grids repeat a handful of distances; evaluate the kernel once per value
        unique, inverse = np.unique(dist, return_inverse=True)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "_unique", unique)
        object.__setattr__(self, "_inverse", inverse.reshape(dist.shape))

    @property
    def n(self) -> int:
        return self.sites.shape[0]

    @property
    def diameter(self) -> float:
        return float(self.dist.max())

    @classmethod
    def regular(cls, size: int, lower: float = 0.0, upper: float = 1.0) -> "Grid":
        """``size x size`` grid on ``[lower, upper]^2``; x varies fastest."""
        axis = np.linspace(lower, upper, size)
        xx, yy = np.meshgrid(axis, axis)
        return cls(np.column_stack([xx.ravel(), yy.ravel()]))

    def permuted(self, order) -> "Grid":
        return Grid(self.sites[np.asarray(order)], metric=self.metric)


def whittle_correlation(d, gamma: float):
    """Whittle (Matern, smoothness one) correlation ``(d/gamma) K1(d/gamma)``.

    Equals 1 at ``d = 0`` and decays monotonically to 0.
    """
    if not gamma > 0:
        raise ValueError(f"range must be positive, got {gamma!r}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = np.atleast_1d(d / gamma)
    out = np.ones_like(x)
    pos = x > 0
    if pos.any():
        out[pos] = x[pos] * bessel_k1(x[pos])
    return out[0] if d.ndim == 0 else out.reshape(d.shape)


def build_correlation(grid: Grid, gamma: float) -> np.ndarray:
    """n x n Whittle correlation matrix over ``grid`` for range ``gamma``."""
    if not (0 < gamma <= RANGE_UPPER):
        raise ValueError(f"range must lie in (0, {RANGE_UPPER:g}], got {gamma!r}")
    values = whittle_correlation(grid._unique, gamma)
    return values[grid._inverse]


@dataclass(frozen=True, eq=False)
class FactoredMatrix:
    """Lower Cholesky factor of a (possibly jittered) SPD matrix."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = solve_triangular(self.lower, b, lower=True, check_finite=False)
        return solve_triangular(self.lower, y, lower=True, trans="T", check_finite=False)

    def inverse(self) -> np.ndarray:
        inv, info = lapack.dpotri(self.lower, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"dpotri failed with info={info}")
        inv = np.tril(inv)
        return inv + np.tril(inv, -1).T

    def log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self.lower)).sum())

    def quad_form(self, x: np.ndarray) -> float:
        y = solve_triangular(self.lower, x, lower=True, check_finite=False)
        return float(np.sum(y * y))

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _cholesky(a: np.ndarray):
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    return c if info == 0 else None


def factor(matrix: np.ndarray) -> FactoredMatrix:
    """Cholesky-factor a symmetric matrix, adding diagonal jitter on failure.

    Jitter starts at 1e-10 times the mean diagonal and grows tenfold up to
    1e-4 times the mean diagonal.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("factor expects a square matrix")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    lower = _cholesky(a)
    if lower is not None:
        return FactoredMatrix(lower, 0.0)
    scale = float(np.mean(np.diag(a)))
    if not scale > 0:
        raise NotPositiveDefinite("matrix has non-positive mean diagonal")
    rel = _JITTER_START
    while rel <= _JITTER_CAP * (1 + 1e-9):
        jitter = rel * scale
        lower = _cholesky(a + jitter * np.eye(a.shape[0]))
        if lower is not None:
            return FactoredMatrix(lower, jitter)
        rel *= 10.0
    raise NotPositiveDefinite(
        f"matrix of size {a.shape[0]} is not positive definite even with jitter {_JITTER_CAP:g} x mean diagonal"
    )


def sample_gaussian_precision(
    precision_times_mean: np.ndarray,
    precision,
    rng: np.random.Generator,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """Draw from ``N(Q^{-1} v, Q^{-1})`` given ``v`` and ``Q`` (or its factor).

    ``z`` replaces the standard-normal noise; pass zeros to get the mean.
    """
    f = precision if isinstance(precision, FactoredMatrix) else factor(precision)
    v = np.asarray(precision_times_mean, dtype=float)
    y = solve_triangular(f.lower, v, lower=True, check_finite=False)
    if z is None:
        z = rng.standard_normal(v.shape)
    return solve_triangular(f.lower, y + z, lower=True, trans="T", check_finite=False)


def log_det(f: FactoredMatrix) -> float:
    return f.log_det()


def quad_form(f: FactoredMatrix, x: np.ndarray) -> float:
    """``x^T A^{-1} x`` for the factored matrix ``A``."""
    return f.quad_form(np.asarray(x, dtype=float))
