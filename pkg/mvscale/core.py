"""Slow/fast mean-field particle engine.

Domain types (time scales, ensembles, model coefficients, simulation settings,
recorded paths) and the explicit Euler-Maruyama stepping used by every other
module. The laws appearing in the coefficients are replaced by the empirical
measures of the simulated particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from loguru import logger

from .errors import ConfigError, NonFiniteError
from .noise import Channel, NoiseStream

# Coefficient signatures, batched over particles (row i is particle i).
SlowDrift = Callable[[np.ndarray, "Ensemble", np.ndarray, "Ensemble"], np.ndarray]
SlowDiffusion = Callable[[np.ndarray, "Ensemble", np.ndarray, "Ensemble"], np.ndarray]
FastDrift = Callable[["Ensemble", np.ndarray, "Ensemble"], np.ndarray]
FastDiffusion = Callable[["Ensemble", np.ndarray, "Ensemble"], np.ndarray]


class Taming(str, Enum):
    NONE = "none"
    DRIFT_TAMED = "drift_tamed"


@dataclass(frozen=True)
class TimeScales:
    """Noise intensity ``epsilon``, time-scale ratio ``delta`` and occupation window ``separation``."""

    epsilon: float
    delta: float
    separation: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.separation > 0.0:
            raise ConfigError(f"separation must be positive, got {self.separation}")

    def check_ldp_regime(self, max_ratio: float = 0.1) -> None:
        """Gate for large-deviation runs: delta << epsilon * separation, separation small."""
        if not 0.0 < self.epsilon < 1.0 or not 0.0 < self.delta < 1.0:
            raise ConfigError("LDP runs need epsilon and delta strictly inside (0, 1)")
        if self.delta >= self.epsilon:
            raise ConfigError(f"LDP runs need delta < epsilon (got delta={self.delta}, epsilon={self.epsilon})")
        if self.separation >= 1.0:
            raise ConfigError(f"LDP runs need separation < 1, got {self.separation}")
        ratio = self.delta / (self.epsilon * self.separation)
        if ratio > max_ratio:
            raise ConfigError(
                f"delta/(epsilon*separation) = {ratio:.3g} exceeds {max_ratio}; shrink delta or widen separation"
            )


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Equally weighted particle cloud, the empirical law (1/N) sum_i delta_{x_i}."""

    particles: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.particles, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ConfigError(f"ensemble needs shape (N>=1, dim>=1), got {arr.shape}")
        bad = _first_non_finite_row(arr)
        if bad is not None:
            raise NonFiniteError("non-finite particle", particle=bad)
        arr.setflags(write=False)
        object.__setattr__(self, "particles", arr)

    @property
    def dim(self) -> int:
        return int(self.particles.shape[1])

    @property
    def count(self) -> int:
        return int(self.particles.shape[0])

    def __len__(self) -> int:
        return self.count

    @classmethod
    def dirac(cls, point: Any, count: int = 1) -> "Ensemble":
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(np.tile(p, (count, 1)))

    def shifted(self, offset: Any) -> "Ensemble":
        return Ensemble(self.particles + np.asarray(offset, dtype=float))


@dataclass(frozen=True)
class AssumptionParams:
    """Constants of the dissipativity, coercivity and growth conditions."""

    kappa: float = 2.0
    q: float = 2.0
    K0: float = 0.0
    K0_tilde: float = 0.0
    K1: float = 1.0
    K2: float = 0.0
    gamma_growth: float = 0.0
    c1: float = 0.0

    def __post_init__(self) -> None:
        if self.kappa < 2 or self.q < 2:
            raise ConfigError("kappa and q must be >= 2")
        if self.K0 < 0 or self.K0_tilde < 0 or self.K2 < 0 or self.c1 < 0:
            raise ConfigError("K0, K0_tilde, K2 and c1 must be non-negative")
        if not self.K1 > 0:
            raise ConfigError("K1 must be positive")
        if not self.K1 > self.K2:
            raise ConfigError(f"need K1 > K2, got K1={self.K1}, K2={self.K2}")
        if self.K0_tilde > self.K0:
            raise ConfigError(f"need K0_tilde <= K0, got {self.K0_tilde} > {self.K0}")
        if not 0.0 <= self.gamma_growth < 1.0:
            raise ConfigError("gamma_growth must lie in [0, 1)")

    def ldp_issues(self) -> list[str]:
        """Conditions the large-deviation results need that these constants do not certify."""
        issues = []
        if self.q < max(4.0, self.kappa):
            issues.append(f"q={self.q} < max(4, kappa={self.kappa})")
        if not self.K0_tilde > 0:
            issues.append("K0_tilde is not positive")
        return issues


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients (b, sigma, f, g) with dimensions and assumption constants.

    All coefficients are batched: ``b(x, mu, y, nu)`` takes ``x`` of shape (N, n) and
    ``y`` of shape (N, m) and returns (N, n); ``sigma`` returns (N, n, d1); ``f`` and
    ``g`` take ``y`` of shape (N, m) and return (N, m) and (N, m, d2).
    """

    name: str
    n: int
    m: int
    d1: int
    d2: int
    b: SlowDrift
    sigma: SlowDiffusion
    f: FastDrift
    g: FastDiffusion
    assumptions: AssumptionParams = field(default_factory=AssumptionParams)
    sigma_depends_on_y: bool = True
    params: Dict[str, Any] = field(default_factory=dict)
    # used whenever a run leaves the taming unset
    default_taming: Taming = Taming.NONE

    def __post_init__(self) -> None:
        for label, value in (("n", self.n), ("m", self.m), ("d1", self.d1), ("d2", self.d2)):
            if int(value) < 1:
                raise ConfigError(f"{label} must be a positive integer, got {value}")
        object.__setattr__(self, "default_taming", Taming(self.default_taming))

    def resolve_taming(self, taming: Optional[Taming]) -> Taming:
        return self.default_taming if taming is None else Taming(taming)

    # --- shape-checked evaluation ----------------------------------------
    def slow_coefficients(
        self, x: np.ndarray, mu: Ensemble, y: np.ndarray, nu: Ensemble
    ) -> Tuple[np.ndarray, np.ndarray]:
        n_rows = x.shape[0]
        drift = np.asarray(self.b(x, mu, y, nu), dtype=float).reshape(n_rows, self.n)
        diff = np.asarray(self.sigma(x, mu, y, nu), dtype=float)
        diff = np.broadcast_to(diff, (n_rows, self.n, self.d1))
        return drift, diff

    def fast_coefficients(self, mu: Ensemble, y: np.ndarray, nu: Ensemble) -> Tuple[np.ndarray, np.ndarray]:
        n_rows = y.shape[0]
        drift = np.asarray(self.f(mu, y, nu), dtype=float).reshape(n_rows, self.m)
        diff = np.asarray(self.g(mu, y, nu), dtype=float)
        diff = np.broadcast_to(diff, (n_rows, self.m, self.d2))
        return drift, diff


@dataclass(frozen=True)
class SimConfig:
    dt_macro: float
    horizon: float
    fast_substep_factor: float = 0.1
    seed: int = 0
    n_particles: int = 1000
    n_reps: int = 1
    # None defers to the model default
    taming: Optional[Taming] = None
    n_jobs: int = 1
    fast_init_scale: float = 1.0
    slow_init_scale: float = 0.0

    def __post_init__(self) -> None:
        if not self.dt_macro > 0 or not self.horizon > 0:
            raise ConfigError("dt_macro and horizon must be positive")
        if self.fast_init_scale < 0 or self.slow_init_scale < 0:
            raise ConfigError("initial scales must be non-negative")
        if not 0.0 < self.fast_substep_factor <= 1.0:
            raise ConfigError("fast_substep_factor must lie in (0, 1]")
        if self.n_particles < 1 or self.n_reps < 1 or self.n_jobs < 1:
            raise ConfigError("n_particles, n_reps and n_jobs must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        ratio = self.horizon / self.dt_macro
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"horizon {self.horizon} is not a multiple of dt_macro {self.dt_macro}")
        if self.taming is not None:
            object.__setattr__(self, "taming", Taming(self.taming))

    @property
    def n_macro(self) -> int:
        return int(round(self.horizon / self.dt_macro))

    def step_schedule(self, ts: TimeScales) -> Tuple[float, int]:
        """Return ``(dt, substeps)`` with dt <= theta*delta tiling each macro interval."""
        target = min(self.dt_macro, self.fast_substep_factor * ts.delta)
        substeps = max(1, math.ceil(self.dt_macro / target - 1e-9))
        return self.dt_macro / substeps, substeps


@dataclass(frozen=True, eq=False)
class PathGrid:
    """Snapshots on a uniform grid; ``snapshots`` is (K, N, n), ``fast`` optional (K, N, m)."""

    times: np.ndarray
    snapshots: np.ndarray
    fast: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        snaps = np.asarray(self.snapshots, dtype=float)
        if snaps.ndim == 2:
            snaps = snaps[:, None, :]
        if times.ndim != 1 or times.size < 1 or snaps.shape[0] != times.size:
            raise ConfigError("times and snapshots must share their first dimension")
        if times[0] != 0.0:
            raise ConfigError("path grids start at t = 0")
        if times.size > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise ConfigError("path grid times must be strictly increasing")
            h = (times[-1] - times[0]) / (times.size - 1)
            if np.max(np.abs(steps - h)) > 1e-12 * max(1.0, abs(times[-1])) + 1e-12 * h * times.size:
                raise ConfigError("path grid must be uniform")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "snapshots", snaps)
        if self.fast is not None:
            object.__setattr__(self, "fast", np.asarray(self.fast, dtype=float))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def __len__(self) -> int:
        return int(self.times.size)

    def slow_at(self, k: int) -> Ensemble:
        return Ensemble(self.snapshots[k])

    def fast_at(self, k: int) -> Ensemble:
        if self.fast is None:
            raise ConfigError("path carries no fast component")
        return Ensemble(self.fast[k])

    def mean_path(self) -> np.ndarray:
        """(K, n) particle means."""
        return self.snapshots.mean(axis=1)


# ----------------------------------------------------------------------
# Stepping
# ----------------------------------------------------------------------


def _first_non_finite_row(arr: np.ndarray) -> Optional[int]:
    finite = np.isfinite(arr)
    if finite.all():
        return None
    rows = np.flatnonzero(~finite.reshape(arr.shape[0], -1).all(axis=1))
    return int(rows[0])


def _require_finite(arr: np.ndarray, message: str, component: str) -> None:
    bad = _first_non_finite_row(arr)
    if bad is not None:
        raise NonFiniteError(message, component=component, particle=bad)


def tamed_drift(raw_drift: np.ndarray, dt: float) -> np.ndarray:
    """Rescale ``raw / (1 + dt |raw|)`` along the last axis; the result has norm <= 1/dt."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    raw = np.asarray(raw_drift, dtype=float)
    if not np.isfinite(raw).all():
        raise NonFiniteError("non-finite drift")
    norm = np.linalg.norm(raw, axis=-1, keepdims=True) if raw.ndim else np.abs(raw)
    return raw / (1.0 + dt * norm)


def apply_diffusion(diffusion: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Row-wise matrix-vector product for (N, k, d) diffusions and (N, d) or (d,) increments."""
    if dw.ndim == 1:
        return np.einsum("nkd,d->nk", diffusion, dw)
    return np.einsum("nkd,nd->nk", diffusion, dw)


def _effective_drift(raw: np.ndarray, dt: float, taming: Taming, component: str) -> np.ndarray:
    _require_finite(raw, "non-finite drift", component)
    if taming == Taming.DRIFT_TAMED:
        return tamed_drift(raw, dt)
    return raw


def advance_coupled(
    x: np.ndarray,
    y: np.ndarray,
    model: ModelSpec,
    ts: TimeScales,
    dt: float,
    noise: NoiseStream,
    step: int,
    *,
    taming: Optional[Taming] = None,
    slow_law: Optional[Ensemble] = None,
    fast_law: Optional[Ensemble] = None,
    slow_channel: int = Channel.SLOW,
    fast_channel: int = Channel.FAST,
    slow_control: Optional[np.ndarray] = None,
    fast_control: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """One Euler-Maruyama step on raw particle arrays.

    Laws default to the pre-step empirical measures of ``x`` and ``y``. Controls are
    deterministic vectors added as ``sigma h1 dt`` and ``g h2 dt / sqrt(delta eps)``.
    """
    taming = model.resolve_taming(taming)
    mu = slow_law if slow_law is not None else Ensemble(x)
    nu = fast_law if fast_law is not None else Ensemble(y)
    n_rows = x.shape[0]

    b, sig = model.slow_coefficients(x, mu, y, nu)
    f, g = model.fast_coefficients(mu, y, nu)
    slow_drift = _effective_drift(b, dt, taming, "slow")
    fast_drift = _effective_drift(f / ts.delta, dt, taming, "fast")

    dw1 = noise.increments(step, n_rows, model.d1, dt, slow_channel)
    dw2 = noise.increments(step, n_rows, model.d2, dt, fast_channel)

    x_new = x + slow_drift * dt
    if ts.epsilon > 0:
        x_new = x_new + math.sqrt(ts.epsilon) * apply_diffusion(sig, dw1)
    y_new = y + fast_drift * dt + apply_diffusion(g, dw2) / math.sqrt(ts.delta)

    if slow_control is not None:
        x_new = x_new + apply_diffusion(sig, np.asarray(slow_control, dtype=float)) * dt
    if fast_control is not None:
        scale = 1.0 / math.sqrt(ts.delta * ts.epsilon)
        y_new = y_new + scale * apply_diffusion(g, np.asarray(fast_control, dtype=float)) * dt

    _require_finite(x_new, "non-finite state", "slow")
    _require_finite(y_new, "non-finite state", "fast")
    return x_new, y_new


def _check_pair(slow: Ensemble, fast: Ensemble, model: ModelSpec) -> None:
    if slow.dim != model.n or fast.dim != model.m:
        raise ConfigError(
            f"ensemble dims ({slow.dim}, {fast.dim}) do not match model dims ({model.n}, {model.m})"
        )
    if slow.count != fast.count:
        raise ConfigError(f"slow and fast ensembles must pair up, got {slow.count} vs {fast.count}")


def step_coupled(
    slow: Ensemble,
    fast: Ensemble,
    model: ModelSpec,
    ts: TimeScales,
    dt: float,
    noise: NoiseStream,
    step: int = 0,
    *,
    theta: float = 0.1,
    taming: Optional[Taming] = None,
) -> Tuple[Ensemble, Ensemble]:
    """Advance paired slow/fast particles by one explicit step of size ``dt``."""
    _check_pair(slow, fast, model)
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if dt > theta * ts.delta * (1 + 1e-12):
        raise ConfigError(f"dt={dt} exceeds theta*delta={theta * ts.delta}")
    x_new, y_new = advance_coupled(
        slow.particles, fast.particles, model, ts, dt, noise, step, taming=taming
    )
    return Ensemble(x_new), Ensemble(y_new)


def simulate(
    slow0: Ensemble,
    fast0: Ensemble,
    model: ModelSpec,
    ts: TimeScales,
    cfg: SimConfig,
    noise: Optional[NoiseStream] = None,
) -> PathGrid:
    """Simulate the coupled particle system and record both components on the macro grid."""
    _check_pair(slow0, fast0, model)
    noise = noise or NoiseStream(cfg.seed)
    dt, substeps = cfg.step_schedule(ts)
    n_macro = cfg.n_macro
    logger.debug(
        "simulate {}: N={} dt={:.3g} substeps={} macro steps={}", model.name, slow0.count, dt, substeps, n_macro
    )

    times = cfg.dt_macro * np.arange(n_macro + 1)
    slow_rec = np.empty((n_macro + 1, slow0.count, model.n))
    fast_rec = np.empty((n_macro + 1, fast0.count, model.m))
    slow_rec[0], fast_rec[0] = slow0.particles, fast0.particles

    x, y = slow0.particles, fast0.particles
    for k in range(n_macro):
        for j in range(substeps):
            step = k * substeps + j
            try:
                x, y = advance_coupled(x, y, model, ts, dt, noise, step, taming=cfg.taming)
            except NonFiniteError as err:
                raise err.at_time(step * dt) from err
        slow_rec[k + 1], fast_rec[k + 1] = x, y
    return PathGrid(times, slow_rec, fast_rec)


def initial_ensembles(
    x0: Any, model: ModelSpec, cfg: SimConfig, noise: Optional[NoiseStream] = None
) -> Tuple[Ensemble, Ensemble]:
    """Slow particles around ``x0`` and Gaussian fast particles of scale ``cfg.fast_init_scale``.

    With ``cfg.slow_init_scale > 0`` the slow particles are spread as ``x0 + s N(0, I)``.
    """
    noise = noise or NoiseStream(cfg.seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.ndim == 1:
        if x0.size != model.n:
            raise ConfigError(f"x0 has {x0.size} entries, model slow dim is {model.n}")
        slow = Ensemble.dirac(x0, cfg.n_particles)
        if cfg.slow_init_scale > 0:
            spread = noise.generator(Channel.INIT, step=1).standard_normal((cfg.n_particles, model.n))
            slow = slow.shifted(cfg.slow_init_scale * spread)
    else:
        slow = Ensemble(x0)
    rng = noise.generator(Channel.INIT)
    fast = Ensemble(cfg.fast_init_scale * rng.standard_normal((slow.count, model.m)))
    return slow, fast
