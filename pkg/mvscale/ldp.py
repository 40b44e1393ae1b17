"""Large-deviation layer.

Q2 (the invariant-averaged diffusion form), the explicit quadratic rate functional
around the averaged path, controlled slow/fast simulation driven by the laws of an
uncontrolled companion run, occupation-measure diagnostics and the exit-rate check
on rare events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy.integrate import trapezoid

from .averaging import AveragedPath
from .core import (
    Ensemble,
    ModelSpec,
    PathGrid,
    SimConfig,
    TimeScales,
    advance_coupled,
    initial_ensembles,
    simulate,
)
from .errors import AdmissibilityError, ConfigError, NonFiniteError, SingularDiffusionError
from .frozen import InvariantEnsemble, averaged_drift
from .measures import psd_eigh
from .models import LinearClosedForm
from .noise import Channel, NoiseStream


# ----------------------------------------------------------------------
# Controls
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Deterministic control h_t in R^(d1+d2) on a uniform grid; zero past the last time."""

    times: np.ndarray
    values: np.ndarray
    d1: int
    d2: int

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2 or values.shape != (times.size, self.d1 + self.d2):
            raise ConfigError(f"control values must have shape ({times.size}, {self.d1 + self.d2})")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ConfigError("control grid must start at 0 and increase strictly")
        if not np.isfinite(values).all():
            raise ConfigError("control values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: Sequence[float], horizon: float, dt: float, d1: int, d2: int) -> "ControlPath":
        times = dt * np.arange(int(round(horizon / dt)) + 1)
        return cls(times, np.tile(np.asarray(value, dtype=float), (times.size, 1)), d1, d2)

    @classmethod
    def zero(cls, horizon: float, dt: float, d1: int, d2: int) -> "ControlPath":
        return cls.constant(np.zeros(d1 + d2), horizon, dt, d1, d2)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def energy(self) -> float:
        """1/2 int |h|^2 dt by the trapezoid rule."""
        return 0.5 * float(trapezoid(np.sum(self.values**2, axis=1), self.times))

    def check_admissible(self, bound: float) -> None:
        total = 2.0 * self.energy
        if total > bound:
            raise AdmissibilityError(f"control energy int |h|^2 = {total:.6g} exceeds the admissible bound {bound}")

    def value_at(self, t: float) -> np.ndarray:
        if t > self.horizon * (1 + 1e-12) + 1e-15:
            return np.zeros(self.d1 + self.d2)
        return np.array([np.interp(t, self.times, self.values[:, j]) for j in range(self.values.shape[1])])

    def split(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        h = self.value_at(t)
        return h[: self.d1], h[self.d1 :]


# ----------------------------------------------------------------------
# Q2 and the rate functional
# ----------------------------------------------------------------------


def q2_matrix(
    x: np.ndarray, mu: Ensemble, inv: InvariantEnsemble, model: ModelSpec, *, force_average: bool = False
) -> np.ndarray:
    """Average of sigma sigma^T over the invariant particles.

    When sigma does not depend on the fast state a single evaluation suffices.
    """
    z = inv.measure.particles
    if not model.sigma_depends_on_y and not force_average:
        z = z[:1]
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, model.n), (z.shape[0], model.n))
    _, sig = model.slow_coefficients(np.ascontiguousarray(xs), mu, z, inv.measure)
    Q = np.einsum("kij,klj->il", sig, sig) / z.shape[0]
    return 0.5 * (Q + Q.T)


@dataclass(frozen=True, eq=False)
class RateEvaluation:
    value: float
    times: np.ndarray
    integrand: np.ndarray
    condition_numbers: np.ndarray
    min_eigenvalues: np.ndarray

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "value": self.value,
            "times": self.times.tolist(),
            "integrand": self.integrand.tolist(),
            "condition_numbers": self.condition_numbers.tolist(),
        }


def _as_path(phi: Union[PathGrid, np.ndarray], n: int) -> np.ndarray:
    if isinstance(phi, PathGrid):
        return phi.mean_path()
    arr = np.asarray(phi, dtype=float)
    return arr.reshape(arr.shape[0], n)


def rate_functional(
    phi: Union[PathGrid, np.ndarray],
    averaged: AveragedPath,
    model: ModelSpec,
    *,
    x: Optional[np.ndarray] = None,
    eig_floor: Optional[float] = None,
    defect_correction: bool = True,
) -> RateEvaluation:
    """1/2 int (phi' - bbar(phi))^T Q2^{-1} (phi' - bbar(phi)) dt on the averaged grid.

    Returns an infinite value when phi does not start at ``x``. With
    ``defect_correction`` the discrete residual of the averaged path itself is
    removed, so the functional vanishes on it exactly.
    """
    times = averaged.times
    path = _as_path(phi, model.n)
    if path.shape[0] != times.size:
        raise ConfigError(f"path has {path.shape[0]} points, averaged grid has {times.size}")
    if isinstance(phi, PathGrid) and not np.allclose(phi.times, times, rtol=0, atol=1e-12):
        raise ConfigError("path and averaged solution must share the time grid")

    x = averaged.path[0] if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    if np.linalg.norm(path[0] - x) > 1e-12 * (1.0 + np.linalg.norm(x)):
        empty = np.empty(0)
        return RateEvaluation(math.inf, times, empty, empty, empty)

    dt = averaged.grid.dt
    dphi = np.gradient(path, dt, axis=0)
    if defect_correction:
        defect = np.gradient(averaged.path, dt, axis=0) - averaged.drift.mean(axis=1)

    K = times.size
    integrand = np.empty(K)
    conds = np.empty(K)
    mins = np.empty(K)
    for k in range(K):
        mu = averaged.law_at(k)
        inv = averaged.invariants[k]
        residual = dphi[k] - averaged_drift(path[k], mu, inv, model, allow_unconverged=True)
        if defect_correction:
            residual = residual - defect[k]
        vals, vecs = psd_eigh(q2_matrix(path[k], mu, inv, model))
        floor = eig_floor if eig_floor is not None else 1e-12 * max(vals.sum() / model.n, np.finfo(float).tiny)
        if vals.min() < floor:
            raise SingularDiffusionError(
                f"Q2 smallest eigenvalue {vals.min():.3e} below floor {floor:.3e} at t={times[k]:.6g}: "
                "the slow diffusion is not uniformly elliptic"
            )
        proj = vecs.T @ residual
        integrand[k] = float(np.sum(proj * proj / vals))
        mins[k] = vals.min()
        conds[k] = vals.max() / vals.min()

    value = 0.5 * float(trapezoid(integrand, times))
    return RateEvaluation(max(value, 0.0), times, integrand, conds, mins)


# ----------------------------------------------------------------------
# Controlled simulation
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlledRun:
    path: PathGrid
    companion: PathGrid
    controls: np.ndarray
    control_horizon: float
    ts: TimeScales
    horizon: float

    @property
    def dt_macro(self) -> float:
        return self.path.dt


def controlled_simulate(
    model: ModelSpec,
    ts: TimeScales,
    control: ControlPath,
    cfg: SimConfig,
    x0: Union[np.ndarray, Sequence[float]],
    *,
    share_companion_noise: bool = False,
    admissible_bound: Optional[float] = None,
    tail: float = 0.0,
    noise: Optional[NoiseStream] = None,
) -> ControlledRun:
    """Controlled pair whose coefficient laws come from an uncontrolled companion run.

    The slow component gains sigma h1 dt, the fast one g h2 dt / sqrt(delta eps).
    ``tail`` extends the run past ``cfg.horizon``; the control is zero past its own
    last grid time.
    """
    if not ts.delta < ts.epsilon:
        raise ConfigError(f"controlled runs need delta < epsilon, got delta={ts.delta}, epsilon={ts.epsilon}")
    if control.d1 != model.d1 or control.d2 != model.d2:
        raise ConfigError("control dimensions do not match the model noise dimensions")
    if control.horizon < cfg.horizon * (1 - 1e-12):
        raise ConfigError(f"control ends at {control.horizon}, before the horizon {cfg.horizon}")
    if admissible_bound is not None:
        control.check_admissible(admissible_bound)
    tail_steps = int(round(tail / cfg.dt_macro))
    if tail < 0 or abs(tail_steps * cfg.dt_macro - tail) > 1e-9 * max(1.0, tail):
        raise ConfigError(f"tail {tail} is not a non-negative multiple of dt_macro")

    noise = noise or NoiseStream(cfg.seed)
    slow0, fast0 = initial_ensembles(x0, model, cfg, noise)
    dt, substeps = cfg.step_schedule(ts)
    n_macro = cfg.n_macro + tail_steps
    if share_companion_noise:
        comp_channels = (Channel.SLOW, Channel.FAST)
    else:
        comp_channels = (Channel.COMPANION_SLOW, Channel.COMPANION_FAST)

    shape_x = (n_macro + 1, slow0.count, model.n)
    shape_y = (n_macro + 1, slow0.count, model.m)
    xs, ys, cxs, cys = np.empty(shape_x), np.empty(shape_y), np.empty(shape_x), np.empty(shape_y)
    controls = np.empty((n_macro + 1, model.d1 + model.d2))
    x = xc = slow0.particles
    y = yc = fast0.particles
    xs[0], ys[0], cxs[0], cys[0] = x, y, xc, yc
    controls[0] = control.value_at(0.0)

    for k in range(n_macro):
        for j in range(substeps):
            step = k * substeps + j
            t = step * dt
            mu, nu = Ensemble(xc), Ensemble(yc)
            h1, h2 = control.split(t)
            try:
                x, y = advance_coupled(
                    x,
                    y,
                    model,
                    ts,
                    dt,
                    noise,
                    step,
                    taming=cfg.taming,
                    slow_law=mu,
                    fast_law=nu,
                    slow_control=h1,
                    fast_control=h2,
                )
                xc, yc = advance_coupled(
                    xc,
                    yc,
                    model,
                    ts,
                    dt,
                    noise,
                    step,
                    taming=cfg.taming,
                    slow_law=mu,
                    fast_law=nu,
                    slow_channel=comp_channels[0],
                    fast_channel=comp_channels[1],
                )
            except NonFiniteError as err:
                raise err.at_time(t) from err
        xs[k + 1], ys[k + 1], cxs[k + 1], cys[k + 1] = x, y, xc, yc
        controls[k + 1] = control.value_at((k + 1) * cfg.dt_macro)

    times = cfg.dt_macro * np.arange(n_macro + 1)
    return ControlledRun(
        PathGrid(times, xs, ys), PathGrid(times, cxs, cys), controls, control.horizon, ts, cfg.horizon
    )


# ----------------------------------------------------------------------
# Occupation measure
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OccupationRecord:
    """Weighted atoms (h_s, Y_s, law id, t) of the windowed occupation measure.

    Atom ``r`` carries mass ``weights[r]`` spread evenly over the particles in ``y[r]``.
    """

    window_times: np.ndarray
    inner_times: np.ndarray
    weights: np.ndarray
    h: np.ndarray
    y: np.ndarray
    law_ids: np.ndarray
    separation: float

    def time_mass(self, t: float) -> float:
        """Mass of the records whose window time lies in [0, t)."""
        return math.fsum(self.weights[self.window_times < t - 1e-12])

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    def h_marginal(self) -> Tuple[np.ndarray, np.ndarray]:
        """Distinct control values and their normalised masses."""
        atoms, inverse = np.unique(self.h, axis=0, return_inverse=True)
        mass = np.bincount(np.asarray(inverse).reshape(-1), weights=self.weights, minlength=atoms.shape[0])
        return atoms, mass / mass.sum()

    def y_marginal(self, t0: float = 0.0, t1: float = math.inf) -> Ensemble:
        """Pooled fast particles of the records with inner time in [t0, t1)."""
        keep = (self.inner_times >= t0 - 1e-12) & (self.inner_times < t1 - 1e-12)
        if not keep.any():
            raise ConfigError(f"no occupation records with inner time in [{t0}, {t1})")
        return Ensemble(self.y[keep].reshape(-1, self.y.shape[2]))

    def h_histogram(self, bins: int = 20, dim: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.h[:, dim], bins=bins, weights=self.weights)

    def y_histogram(self, bins: int = 40, dim: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        per_particle = np.repeat(self.weights / self.y.shape[1], self.y.shape[1])
        return np.histogram(self.y[:, :, dim].reshape(-1), bins=bins, weights=per_particle)


def occupation_measure(run: ControlledRun, separation: Optional[float] = None, thinning: int = 1) -> OccupationRecord:
    """Quadrature of the occupation measure with window ``separation`` on the macro grid.

    For each macro time t < T and inner time s in [t, t + separation) the record
    (h_s, Y_s, law id of s, t) gets weight (ds / separation) * dt.
    """
    sep = run.ts.separation if separation is None else separation
    ds = run.dt_macro
    J = int(round(sep / ds))
    if J < 1 or abs(J * ds - sep) > 1e-9 * max(1.0, sep):
        raise ConfigError(f"separation {sep} is not a positive multiple of the macro step {ds}")
    if thinning < 1:
        raise ConfigError("thinning must be >= 1")
    times = run.path.times
    n_windows = int(round(run.horizon / ds))
    if n_windows + J - 2 > times.size - 1:
        raise ConfigError(f"run too short for windows of width {sep}; extend the tail")

    k_idx = np.repeat(np.arange(n_windows), J)
    s_idx = k_idx + np.tile(np.arange(J), n_windows)
    fast = run.path.fast[s_idx][:, ::thinning, :]
    weights = np.full(k_idx.size, ds * ds / sep)
    return OccupationRecord(
        window_times=times[k_idx],
        inner_times=times[s_idx],
        weights=weights,
        h=run.controls[s_idx],
        y=fast,
        law_ids=s_idx,
        separation=sep,
    )


# ----------------------------------------------------------------------
# Exit rates
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExitRateEstimate:
    epsilon: float
    radius: float
    hits: int
    total: int

    @property
    def probability(self) -> float:
        return self.hits / self.total

    @property
    def rate(self) -> float:
        """-epsilon log P-hat; infinite when no path exited."""
        return math.inf if self.hits == 0 else -self.epsilon * math.log(self.probability)


def _exit_hits(
    model: ModelSpec, ts: TimeScales, cfg: SimConfig, x0: np.ndarray, reference: np.ndarray, radius: float, rep: int
) -> int:
    noise = NoiseStream(cfg.seed, rep)
    slow0, fast0 = initial_ensembles(x0, model, cfg, noise)
    path = simulate(slow0, fast0, model, ts, cfg, noise)
    dev = np.linalg.norm(path.snapshots - reference[:, None, :], axis=2).max(axis=0)
    return int(np.count_nonzero(dev > radius))


def exit_probability(
    model: ModelSpec,
    ts: TimeScales,
    cfg: SimConfig,
    x0: Union[np.ndarray, Sequence[float]],
    radius: float,
    averaged: AveragedPath,
) -> ExitRateEstimate:
    """Fraction of particle paths with sup_t |X_t - Xbar_t| > radius on the macro grid."""
    if not radius > 0:
        raise ConfigError("exit radius must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    hits = Parallel(n_jobs=cfg.n_jobs, prefer="threads")(
        delayed(_exit_hits)(model, ts, cfg, x0, averaged.path, radius, rep) for rep in range(cfg.n_reps)
    )
    est = ExitRateEstimate(ts.epsilon, radius, int(sum(hits)), cfg.n_reps * cfg.n_particles)
    logger.info("exit probability eps={} r={}: {}/{} -> rate {:.4g}", ts.epsilon, radius, est.hits, est.total, est.rate)
    return est


@dataclass(frozen=True)
class ExitAction:
    value: float
    tau: float
    sign: float
    closed_form: Optional[float] = None


def exit_action_search(
    averaged: AveragedPath,
    model: ModelSpec,
    radius: float,
    *,
    deviation: Optional[Callable[[float, float, np.ndarray], np.ndarray]] = None,
    n_tau: int = 50,
) -> ExitAction:
    """Minimal rate over candidate exit paths Xbar + sign * deviation(radius, tau, t).

    Exit times tau run over a dense sub-grid of (0, T]; the default deviation family
    is the optimal one of the linear benchmark.
    """
    closed = None
    if deviation is None:
        lin = LinearClosedForm.from_model(model)
        deviation = lin.exit_deviation
        closed = lin.exit_action(radius, float(averaged.times[-1]))
    times = averaged.times
    idx = np.unique(np.linspace(1, times.size - 1, min(n_tau, times.size - 1)).round().astype(int))
    best = ExitAction(math.inf, math.nan, 0.0, closed)
    for k in idx:
        tau = float(times[k])
        shape = np.asarray(deviation(radius, tau, times), dtype=float).reshape(times.size, -1)
        for sign in (1.0, -1.0):
            value = rate_functional(averaged.path + sign * shape, averaged, model).value
            if value < best.value:
                best = ExitAction(value, tau, sign, closed)
    logger.debug("exit action search: min {:.5g} at tau={:.4g} (closed form {})", best.value, best.tau, closed)
    return best
