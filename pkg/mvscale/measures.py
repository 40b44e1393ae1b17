"""Measure-level primitives on empirical laws.

Moments, Wasserstein-2 distances, the Gibbs-weighted means used by consensus
dynamics, the radial cut-off, population covariances and PSD square roots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .core import Ensemble
from .errors import ConfigError, NonFiniteError, NotPsdError

EnsembleLike = Union[Ensemble, np.ndarray]
PsdMatrix = np.ndarray

EXACT_ASSIGNMENT_LIMIT = 512
DEFAULT_PROJECTIONS = 64
PSD_EIG_FLOOR = 1e-10
SYMMETRY_TOL = 1e-12


def as_particles(mu: EnsembleLike) -> np.ndarray:
    if isinstance(mu, Ensemble):
        return mu.particles
    arr = np.asarray(mu, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ConfigError("empty ensemble")
    return arr


def moment(mu: EnsembleLike, p: float) -> float:
    """(1/N) sum_i |x_i|^p."""
    if p < 1:
        raise ConfigError(f"moment order must be >= 1, got {p}")
    pts = as_particles(mu)
    norms = np.linalg.norm(pts, axis=1)
    return math.fsum(norms**p) / pts.shape[0]


def mean(mu: EnsembleLike) -> np.ndarray:
    return as_particles(mu).mean(axis=0)


# ----------------------------------------------------------------------
# Wasserstein-2
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class W2Estimate:
    value: float
    approximate: bool
    method: str

    def __float__(self) -> float:
        return self.value


def wasserstein2(
    mu: EnsembleLike,
    nu: EnsembleLike,
    *,
    n_projections: int = DEFAULT_PROJECTIONS,
    exact_limit: int = EXACT_ASSIGNMENT_LIMIT,
    seed: int = 0,
) -> W2Estimate:
    """W2 between two empirical measures.

    1D uses the sorted (monotone) coupling; up to ``exact_limit`` points per side an
    optimal assignment; beyond that a sliced estimate flagged ``approximate``.
    """
    a, b = as_particles(mu), as_particles(nu)
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    if a.shape[1] == 1:
        if a.shape[0] == b.shape[0]:
            diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
            return W2Estimate(math.sqrt(math.fsum(diff * diff) / a.shape[0]), False, "sorted")
        value = float(ot.emd2_1d(a[:, 0], b[:, 0], metric="sqeuclidean"))
        return W2Estimate(math.sqrt(max(value, 0.0)), False, "quantile")

    if max(a.shape[0], b.shape[0]) <= exact_limit:
        cost = cdist(a, b, metric="sqeuclidean")
        if a.shape[0] == b.shape[0]:
            rows, cols = linear_sum_assignment(cost)
            return W2Estimate(math.sqrt(math.fsum(cost[rows, cols]) / a.shape[0]), False, "assignment")
        wa = np.full(a.shape[0], 1.0 / a.shape[0])
        wb = np.full(b.shape[0], 1.0 / b.shape[0])
        return W2Estimate(math.sqrt(max(float(ot.emd2(wa, wb, cost)), 0.0)), False, "emd")

    value = float(ot.sliced_wasserstein_distance(a, b, n_projections=n_projections, p=2, seed=seed))
    return W2Estimate(value, True, "sliced")


# ----------------------------------------------------------------------
# Consensus weighted means
# ----------------------------------------------------------------------


def _gibbs_average(points: np.ndarray, energies: np.ndarray, scale: float) -> np.ndarray:
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise NonFiniteError("non-finite particle in weighted mean", component="weights", particle=int(bad[0]))
    energies = np.asarray(energies, dtype=float).reshape(points.shape[0])
    if np.isnan(energies).any():
        raise ConfigError("weight function returned NaN on a finite particle")
    exponent = -scale * energies
    overflow = np.flatnonzero(~np.isfinite(exponent))
    if overflow.size:
        # finite particles, but the state is large enough for h or ell to overflow
        raise NonFiniteError("weight function overflowed", component="weights", particle=int(overflow[0]))
    # shift by the largest exponent (smallest energy) so the top weight is exactly 1
    weights = np.exp(exponent - exponent.max())
    total = weights.sum()
    assert total > 0.0, "all Gibbs weights underflowed"
    return (weights @ points) / total


def weighted_mean_h(nu: EnsembleLike, h: Callable[[np.ndarray], np.ndarray], beta: float) -> np.ndarray:
    """sum_i y_i exp(-beta h(y_i)) / sum_i exp(-beta h(y_i))."""
    if not beta > 0:
        raise ConfigError("beta must be positive")
    pts = as_particles(nu)
    return _gibbs_average(pts, h(pts), beta)


def weighted_mean_ell(
    mu: EnsembleLike,
    nu: EnsembleLike,
    ell: Callable[[np.ndarray, np.ndarray], np.ndarray],
    alpha: float,
    beta: float,
    h: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Slow consensus point: Gibbs mean of mu under ell(., y*) with y* = weighted_mean_h(nu)."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    y_star = weighted_mean_h(nu, h, beta)
    pts = as_particles(mu)
    return _gibbs_average(pts, ell(pts, y_star), alpha)


def weighted_mean_moment_bound(nu: EnsembleLike, beta: float, c_l: float, c_u: float) -> float:
    """Upper bound exp(-2 beta (c_l - c_u)) M2(nu) on |M_beta^h(nu)|^2 for c_l <= h - inf h <= c_u."""
    return math.exp(-2.0 * beta * (c_l - c_u)) * moment(nu, 2)


def cutoff_chi(u: np.ndarray, R0: float) -> np.ndarray:
    """Radial projection onto the closed ball of radius ``R0`` (row-wise for batches)."""
    if not R0 > 0:
        raise ConfigError("R0 must be positive")
    u = np.asarray(u, dtype=float)
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.where(norm > R0, R0 / np.where(norm > 0, norm, 1.0), 1.0)
    return u * scale


# ----------------------------------------------------------------------
# Covariance and square roots
# ----------------------------------------------------------------------


def covariance(mu: EnsembleLike) -> PsdMatrix:
    """Population covariance (divides by N)."""
    pts = as_particles(mu)
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred / pts.shape[0]
    return 0.5 * (cov + cov.T)


def check_symmetric(M: np.ndarray) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {M.shape}")
    scale = np.abs(M).max() if M.size else 0.0
    scale = scale if scale > 0 else 1.0
    if np.abs(M - M.T).max() > SYMMETRY_TOL * scale:
        raise NotPsdError("matrix is not symmetric")
    return 0.5 * (M + M.T)


def psd_eigh(M: np.ndarray, floor: float = PSD_EIG_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition with small negative eigenvalues clipped to zero."""
    M = check_symmetric(M)
    vals, vecs = np.linalg.eigh(M)
    tol = floor * max(np.trace(M) / M.shape[0], np.finfo(float).tiny)
    if vals.size and vals.min() < -tol:
        raise NotPsdError(f"not PSD: smallest eigenvalue {vals.min():.3e}")
    return np.clip(vals, 0.0, None), vecs


def psd_sqrt(M: PsdMatrix) -> PsdMatrix:
    vals, vecs = psd_eigh(M)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def batch_diag(values: np.ndarray) -> np.ndarray:
    """(N, k) -> (N, k, k) diagonal matrices."""
    values = np.asarray(values, dtype=float)
    n_rows, k = values.shape
    out = np.zeros((n_rows, k, k))
    idx = np.arange(k)
    out[:, idx, idx] = values
    return out
