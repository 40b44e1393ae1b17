"""Averaged dynamics and the law-of-large-numbers rate experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from .core import Ensemble, ModelSpec, PathGrid, SimConfig, TimeScales, initial_ensembles, simulate
from .errors import ConfigError, DegenerateFitError, NumericalError, SolverError
from .frozen import InvariantCache, InvariantEnsemble, InvariantSolverConfig, averaged_drift
from .noise import Channel, NoiseStream, derive_seed


@dataclass(frozen=True, eq=False)
class AveragedPath:
    """Averaged solution on a uniform grid with the b-bar values and frozen laws used."""

    grid: PathGrid
    drift: np.ndarray
    invariants: List[InvariantEnsemble] = field(repr=False)
    scheme: str = "euler"

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def path(self) -> np.ndarray:
        """(K, n) mean over the path ensemble; the path itself for a deterministic start."""
        return self.grid.mean_path()

    def law_at(self, k: int) -> Ensemble:
        return self.grid.slow_at(k)


def _drift_rows(
    X: np.ndarray,
    model: ModelSpec,
    cache: InvariantCache,
    t: float,
    require_converged: bool,
) -> Tuple[np.ndarray, InvariantEnsemble]:
    mu = Ensemble(X)
    try:
        inv = cache.get(mu)
    except NumericalError as err:
        raise SolverError(f"invariant-measure solve failed: {err}", time=t) from err
    if not inv.converged:
        if require_converged:
            raise SolverError("invariant-measure solve did not converge", time=t)
        logger.warning("using unconverged invariant ensemble at t={:.4g} (W2 residual {:.3g})", t, inv.w2_residual)
    rows = np.stack([averaged_drift(x, mu, inv, model, allow_unconverged=True) for x in X])
    return rows, inv


def solve_averaged(
    x0: Union[np.ndarray, Sequence[float], Ensemble],
    model: ModelSpec,
    horizon: float,
    dt: float,
    inv_cfg: InvariantSolverConfig = InvariantSolverConfig(),
    *,
    scheme: str = "euler",
    cache: Optional[InvariantCache] = None,
    require_converged: bool = False,
) -> AveragedPath:
    """Integrate dX/dt = b-bar(X, L(X)).

    A point ``x0`` gives a single path whose law is the Dirac along it; an ``Ensemble``
    gives one ODE path per particle, coupled through their shared empirical law.
    """
    if not dt > 0 or not horizon > 0:
        raise ConfigError("dt and horizon must be positive")
    if scheme not in ("euler", "heun"):
        raise ConfigError(f"unknown averaged scheme '{scheme}'")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError(f"horizon {horizon} is not a multiple of dt {dt}")

    if isinstance(x0, Ensemble):
        X = x0.particles.copy()
    else:
        X = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, -1)
    if X.shape[1] != model.n:
        raise ConfigError(f"initial state has dim {X.shape[1]}, model slow dim is {model.n}")
    cache = cache or InvariantCache(model, inv_cfg)

    snaps = np.empty((steps + 1,) + X.shape)
    drifts = np.empty((steps + 1,) + X.shape)
    invariants: List[InvariantEnsemble] = []
    snaps[0] = X
    for k in range(steps + 1):
        t = k * dt
        B, inv = _drift_rows(X, model, cache, t, require_converged)
        drifts[k] = B
        invariants.append(inv)
        if k == steps:
            break
        if scheme == "euler":
            X = X + dt * B
        else:
            B_pred, _ = _drift_rows(X + dt * B, model, cache, t + dt, require_converged)
            X = X + 0.5 * dt * (B + B_pred)
        snaps[k + 1] = X

    logger.debug(
        "averaged solve ({}): {} steps, cache hits={} misses={}", scheme, steps, cache.hits, cache.misses
    )
    return AveragedPath(PathGrid(dt * np.arange(steps + 1), snaps), drifts, invariants, scheme)


# ----------------------------------------------------------------------
# Averaging error
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class AveragingError:
    estimate: float
    std_error: float
    per_rep: np.ndarray

    def __iter__(self):
        yield self.estimate
        yield self.std_error


def _mean_and_se(values: np.ndarray) -> Tuple[float, float]:
    n = values.size
    mean = math.fsum(values) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _replication_deviation(
    model: ModelSpec, ts: TimeScales, cfg: SimConfig, x0: np.ndarray, reference: np.ndarray, rep: int
) -> float:
    noise = NoiseStream(cfg.seed, rep)
    slow0, fast0 = initial_ensembles(x0, model, cfg, noise)
    path = simulate(slow0, fast0, model, ts, cfg, noise)
    # (K, N, n) - (K, 1, n)
    dev = np.sum((path.snapshots - reference[:, None, :]) ** 2, axis=2)
    return math.fsum(dev.max(axis=0)) / dev.shape[1]


def averaging_error(
    model: ModelSpec,
    ts: TimeScales,
    cfg: SimConfig,
    x0: Union[np.ndarray, Sequence[float]],
    *,
    inv_cfg: InvariantSolverConfig = InvariantSolverConfig(),
    averaged: Optional[AveragedPath] = None,
) -> AveragingError:
    """Monte Carlo estimate of E[sup_t |X_t - Xbar_t|^2] on the macro grid with its standard error."""
    if cfg.n_reps < 2:
        raise ConfigError("averaging_error needs at least 2 replications")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if averaged is None:
        averaged = solve_averaged(x0, model, cfg.horizon, cfg.dt_macro, inv_cfg)
    if averaged.grid.times.size != cfg.n_macro + 1 or not np.allclose(
        averaged.grid.times, cfg.dt_macro * np.arange(cfg.n_macro + 1), rtol=0, atol=1e-12
    ):
        raise ConfigError("averaged path grid does not match the macro recording grid")
    reference = averaged.path

    values = Parallel(n_jobs=cfg.n_jobs, prefer="threads")(
        delayed(_replication_deviation)(model, ts, cfg, x0, reference, rep) for rep in range(cfg.n_reps)
    )
    per_rep = np.asarray(values, dtype=float)
    estimate, se = _mean_and_se(per_rep)
    logger.info(
        "averaging error eps={:.4g} delta={:.4g}: {:.5g} +/- {:.3g} ({} reps)",
        ts.epsilon,
        ts.delta,
        estimate,
        se,
        cfg.n_reps,
    )
    return AveragingError(estimate, se, per_rep)


# ----------------------------------------------------------------------
# Rate sweep
# ----------------------------------------------------------------------


@dataclass
class RateReport:
    epsilons: np.ndarray
    deltas: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    slope: float
    slope_ci: Tuple[float, float]
    monotone_violations: List[Tuple[int, int]] = field(default_factory=list)
    failed_cells: List[int] = field(default_factory=list)

    @property
    def scale(self) -> np.ndarray:
        """epsilon + delta^(1/3)."""
        return self.epsilons + np.cbrt(self.deltas)

    def rows(self) -> List[Tuple[float, float, float, float]]:
        return [
            (float(e), float(d), float(v), float(s))
            for e, d, v, s in zip(self.epsilons, self.deltas, self.estimates, self.std_errors)
        ]


def power_delta_policy(power: float = 3.0) -> Callable[[float], float]:
    def policy(eps: float) -> float:
        return eps**power

    return policy


def _fit_slope(scale: np.ndarray, estimates: np.ndarray) -> float:
    lx = np.log(scale)
    if np.ptp(lx) <= 1e-12 * max(1.0, float(np.abs(lx).max())):
        raise DegenerateFitError("degenerate regression: all cells share the same epsilon + delta^(1/3)")
    if np.any(estimates <= 0):
        raise DegenerateFitError("degenerate regression: non-positive error estimate")
    slope, _ = np.polyfit(lx, np.log(estimates), 1)
    return float(slope)


def monotonicity_violations(
    epsilons: np.ndarray, estimates: np.ndarray, std_errors: np.ndarray, n_se: float = 2.0
) -> List[Tuple[int, int]]:
    """Pairs (i, j) of neighbouring cells, eps_i < eps_j, where the error grows as eps shrinks."""
    order = np.argsort(epsilons)
    bad = []
    for i, j in zip(order[:-1], order[1:]):
        joint = math.sqrt(std_errors[i] ** 2 + std_errors[j] ** 2)
        if estimates[i] > estimates[j] + n_se * joint:
            bad.append((int(i), int(j)))
    return bad


def rate_sweep(
    model: ModelSpec,
    eps_grid: Sequence[float],
    cfg: SimConfig,
    x0: Union[np.ndarray, Sequence[float]],
    *,
    delta_policy: Optional[Callable[[float], float]] = None,
    separation: float = 0.1,
    inv_cfg: InvariantSolverConfig = InvariantSolverConfig(),
    n_boot: int = 1000,
) -> RateReport:
    """Averaging error per (epsilon, delta(epsilon)) cell and the fitted log-log slope."""
    if len(eps_grid) < 4:
        raise ConfigError("rate sweep needs at least 4 grid points")
    policy = delta_policy or power_delta_policy(3.0)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    averaged = solve_averaged(x0, model, cfg.horizon, cfg.dt_macro, inv_cfg)

    eps_ok, delta_ok, est, se, reps, failed = [], [], [], [], [], []
    for cell, eps in enumerate(eps_grid):
        delta = float(policy(float(eps)))
        cell_cfg = replace(cfg, seed=derive_seed(cfg.seed, cell))
        try:
            ts = TimeScales(float(eps), delta, separation)
            result = averaging_error(model, ts, cell_cfg, x0, inv_cfg=inv_cfg, averaged=averaged)
        except NumericalError as err:
            logger.warning("rate sweep cell {} (eps={}) failed: {}", cell, eps, err)
            failed.append(cell)
            continue
        eps_ok.append(float(eps))
        delta_ok.append(delta)
        est.append(result.estimate)
        se.append(result.std_error)
        reps.append(result.per_rep)

    if len(est) < 3:
        raise DegenerateFitError(f"degenerate regression: only {len(est)} successful cells")
    epsilons, deltas = np.asarray(eps_ok), np.asarray(delta_ok)
    estimates, std_errors = np.asarray(est), np.asarray(se)
    scale = epsilons + np.cbrt(deltas)
    slope = _fit_slope(scale, estimates)

    rng = NoiseStream(cfg.seed).generator(Channel.BOOTSTRAP)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        resampled = np.array([r[rng.integers(0, r.size, r.size)].mean() for r in reps])
        boot[b] = _fit_slope(scale, np.maximum(resampled, np.finfo(float).tiny))
    lo, hi = np.percentile(boot, [2.5, 97.5])

    report = RateReport(
        epsilons,
        deltas,
        estimates,
        std_errors,
        slope,
        (float(lo), float(hi)),
        monotonicity_violations(epsilons, estimates, std_errors),
        failed,
    )
    logger.info("rate sweep slope {:.4f} (95% CI {:.4f} .. {:.4f})", slope, lo, hi)
    if report.monotone_violations:
        logger.warning("averaging error not monotone in epsilon for cells {}", report.monotone_violations)
    return report
