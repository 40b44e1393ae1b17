"""Frozen fast dynamics.

With the slow law held at ``mu`` the fast component solves, at unit speed,

    dY = f(mu, Y, L(Y)) dt + g(mu, Y, L(Y)) dW.

This module approximates its invariant measure by long particle runs, co-evolves
tagged copies against the law of the flow (the lifted pair), estimates the
exponential ergodicity rate by synchronous coupling and evaluates the averaged
drift. ``InvariantCache`` amortises the nested invariant solves of the averaging
layer.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from .core import Ensemble, ModelSpec, PathGrid, Taming, _effective_drift, _require_finite, apply_diffusion
from .errors import ConfigError, DegenerateFitError, NonFiniteError, SolverError
from .measures import as_particles, moment, wasserstein2
from .noise import Channel, NoiseStream, derive_seed


@dataclass(frozen=True)
class InvariantSolverConfig:
    n_particles: int = 2000
    dt: float = 0.01
    tol: float = 0.05
    check_lag: float = 1.0
    max_time: float = 50.0
    taming: Optional[Taming] = None
    antithetic: bool = True
    n_projections: int = 64
    n_tagged: int = 1024
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_particles < 1 or self.n_tagged < 1:
            raise ConfigError("n_particles and n_tagged must be positive")
        if not self.dt > 0 or not self.tol > 0 or not self.check_lag > 0:
            raise ConfigError("dt, tol and check_lag must be positive")
        if self.max_time < self.check_lag:
            raise ConfigError("max_time must cover at least one check lag")
        if self.taming is not None:
            object.__setattr__(self, "taming", Taming(self.taming))

    @property
    def lag_steps(self) -> int:
        return max(1, int(round(self.check_lag / self.dt)))


@dataclass(frozen=True, eq=False)
class InvariantEnsemble:
    measure: Ensemble
    frozen_mu: Ensemble
    converged: bool
    w2_residual: float
    burn_in_time: float
    n_checks: int = 0


@dataclass(frozen=True, eq=False)
class LiftedPairSample:
    time: float
    tagged: np.ndarray
    flow_law: Ensemble

    @property
    def tagged_state(self) -> np.ndarray:
        """First tagged copy."""
        return self.tagged[0]


# ----------------------------------------------------------------------
# Stepping
# ----------------------------------------------------------------------


def _increments(
    noise: NoiseStream, step: int, n_rows: int, dim: int, dt: float, channel: int, antithetic: bool
) -> np.ndarray:
    if not antithetic or n_rows < 2:
        return noise.increments(step, n_rows, dim, dt, channel)
    half = n_rows // 2
    base = noise.increments(step, n_rows - half, dim, dt, channel)
    return np.vstack([base, -base[:half]])


def _frozen_advance(
    y: np.ndarray,
    mu: Ensemble,
    model: ModelSpec,
    dt: float,
    dw: np.ndarray,
    *,
    law: Optional[Ensemble] = None,
    taming: Optional[Taming] = None,
    component: str = "flow",
) -> np.ndarray:
    law = law if law is not None else Ensemble(y)
    f, g = model.fast_coefficients(mu, y, law)
    drift = _effective_drift(f, dt, model.resolve_taming(taming), component)
    y_new = y + drift * dt + apply_diffusion(g, dw)
    _require_finite(y_new, "non-finite state", component)
    return y_new


def _check_frozen(mu: Ensemble, gamma0: Ensemble, model: ModelSpec, dt: float, theta: float) -> None:
    if mu.dim != model.n or gamma0.dim != model.m:
        raise ConfigError(f"frozen run needs slow dim {model.n} and fast dim {model.m}")
    if not 0 < dt <= theta * (1 + 1e-12):
        raise ConfigError(f"frozen step dt={dt} must lie in (0, {theta}]")


def simulate_frozen(
    mu: Ensemble,
    gamma0: Ensemble,
    model: ModelSpec,
    k_steps: int,
    dt: float,
    noise: Optional[NoiseStream] = None,
    *,
    theta: float = 0.1,
    taming: Optional[Taming] = None,
    antithetic: bool = False,
    record_every: int = 1,
) -> PathGrid:
    """Self-interacting fast particles with the slow law frozen at ``mu``."""
    _check_frozen(mu, gamma0, model, dt, theta)
    if k_steps < 0 or record_every < 1:
        raise ConfigError("k_steps must be >= 0 and record_every >= 1")
    noise = noise or NoiseStream(0)
    n_rec = k_steps // record_every
    rec = np.empty((n_rec + 1, gamma0.count, model.m))
    rec[0] = gamma0.particles
    y = gamma0.particles
    for step in range(k_steps):
        dw = _increments(noise, step, y.shape[0], model.d2, dt, Channel.FLOW, antithetic)
        try:
            y = _frozen_advance(y, mu, model, dt, dw, taming=taming)
        except NonFiniteError as err:
            raise err.at_time(step * dt) from err
        if (step + 1) % record_every == 0:
            rec[(step + 1) // record_every] = y
    return PathGrid(dt * record_every * np.arange(n_rec + 1), rec)


def default_fast_start(model: ModelSpec, cfg: InvariantSolverConfig, noise: NoiseStream) -> Ensemble:
    """Gaussian start, mirrored in its second half when the solver is antithetic."""
    rng = noise.generator(Channel.INIT)
    n = cfg.n_particles
    if cfg.antithetic and n >= 2:
        base = rng.standard_normal((n - n // 2, model.m))
        pts = np.vstack([base, -base[: n // 2]])
    else:
        pts = rng.standard_normal((n, model.m))
    return Ensemble(cfg.init_scale * pts)


def invariant_measure(
    mu: Ensemble,
    model: ModelSpec,
    cfg: InvariantSolverConfig = InvariantSolverConfig(),
    gamma0: Optional[Ensemble] = None,
    noise: Optional[NoiseStream] = None,
) -> InvariantEnsemble:
    """Run the frozen system until lagged snapshots agree in W2 on two consecutive checks."""
    noise = noise or NoiseStream(cfg.seed)
    gamma0 = gamma0 if gamma0 is not None else default_fast_start(model, cfg, noise)
    _check_frozen(mu, gamma0, model, cfg.dt, 1.0)

    lag = cfg.lag_steps
    max_steps = max(lag, int(math.ceil(cfg.max_time / cfg.dt - 1e-9)))
    y = gamma0.particles
    reference = y
    passes, checks = 0, 0
    best = math.inf
    residual = math.inf

    for step in range(max_steps):
        dw = _increments(noise, step, y.shape[0], model.d2, cfg.dt, Channel.FLOW, cfg.antithetic)
        try:
            y = _frozen_advance(y, mu, model, cfg.dt, dw, taming=cfg.taming)
        except NonFiniteError as err:
            raise err.at_time(step * cfg.dt) from err
        if (step + 1) % lag:
            continue
        checks += 1
        residual = float(wasserstein2(reference, y, n_projections=cfg.n_projections, seed=cfg.seed))
        best = min(best, residual)
        reference = y
        passes = passes + 1 if residual <= cfg.tol else 0
        logger.debug("invariant check {} at t={:.3g}: W2 lag residual {:.4g}", checks, (step + 1) * cfg.dt, residual)
        if passes >= 2:
            return InvariantEnsemble(Ensemble(y), mu, True, residual, (step + 1) * cfg.dt, checks)

    logger.warning(
        "invariant measure not converged after t={:.3g} (best W2 residual {:.4g} > tol {})",
        max_steps * cfg.dt,
        best,
        cfg.tol,
    )
    return InvariantEnsemble(Ensemble(y), mu, False, best, max_steps * cfg.dt, checks)


# ----------------------------------------------------------------------
# Lifted pair and ergodicity
# ----------------------------------------------------------------------


def lifted_pair_simulate(
    mu: Ensemble,
    gamma0: Ensemble,
    tagged_y: np.ndarray,
    model: ModelSpec,
    horizon: float,
    dt: float,
    noise: Optional[NoiseStream] = None,
    *,
    n_tagged: int = 1024,
    noise_index: Optional[Sequence[int]] = None,
    taming: Optional[Taming] = None,
    record_every: int = 1,
) -> List[LiftedPairSample]:
    """Co-evolve the flow ensemble and tagged copies driven by the flow's law.

    The flow reads only its own noise channel, so its law does not depend on the
    tagged start. With ``noise_index`` tagged copy ``j`` reuses the noise of flow
    particle ``noise_index[j]`` instead of the tagged channel.
    """
    _check_frozen(mu, gamma0, model, dt, 1.0)
    noise = noise or NoiseStream(0)
    k_steps = int(round(horizon / dt))
    if k_steps < 1 or abs(k_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError(f"horizon {horizon} is not a positive multiple of dt {dt}")

    index = None if noise_index is None else np.asarray(noise_index, dtype=int)
    count = n_tagged if index is None else index.size
    tagged = np.broadcast_to(np.asarray(tagged_y, dtype=float).reshape(-1, model.m), (count, model.m)).copy()

    y = gamma0.particles
    out = [LiftedPairSample(0.0, tagged.copy(), gamma0)]
    for step in range(k_steps):
        law = Ensemble(y)
        dw_flow = noise.increments(step, y.shape[0], model.d2, dt, Channel.FLOW)
        if index is None:
            dw_tag = noise.increments(step, count, model.d2, dt, Channel.TAGGED)
        else:
            dw_tag = dw_flow[index]
        try:
            y_next = _frozen_advance(y, mu, model, dt, dw_flow, law=law, taming=taming)
            tagged = _frozen_advance(tagged, mu, model, dt, dw_tag, law=law, taming=taming, component="tagged")
        except NonFiniteError as err:
            raise err.at_time(step * dt) from err
        y = y_next
        if (step + 1) % record_every == 0:
            out.append(LiftedPairSample((step + 1) * dt, tagged.copy(), Ensemble(y)))
    return out


@dataclass(frozen=True)
class ErgodicityFit:
    rate: float
    times: np.ndarray
    distances: np.ndarray
    n_fit: int


def ergodicity_fit(
    mu: Ensemble,
    model: ModelSpec,
    init1: Ensemble,
    init2: Ensemble,
    horizon: float,
    dt: float,
    noise: Optional[NoiseStream] = None,
    *,
    taming: Optional[Taming] = None,
    floor_rel: float = 1e-8,
    min_points: int = 3,
    n_projections: int = 64,
) -> ErgodicityFit:
    """Synchronously coupled frozen runs; fit the decay of log W2 between them."""
    _check_frozen(mu, init1, model, dt, 1.0)
    if init1.count != init2.count or init1.dim != init2.dim:
        raise ConfigError("synchronous coupling needs ensembles of equal shape")
    noise = noise or NoiseStream(0)
    k_steps = int(round(horizon / dt))
    y1, y2 = init1.particles, init2.particles

    times = [0.0]
    dist = [float(wasserstein2(y1, y2, n_projections=n_projections))]
    for step in range(k_steps):
        dw = noise.increments(step, y1.shape[0], model.d2, dt, Channel.FLOW)
        try:
            y1 = _frozen_advance(y1, mu, model, dt, dw, taming=taming)
            y2 = _frozen_advance(y2, mu, model, dt, dw, taming=taming)
        except NonFiniteError as err:
            raise err.at_time(step * dt) from err
        times.append((step + 1) * dt)
        dist.append(float(wasserstein2(y1, y2, n_projections=n_projections)))

    t = np.asarray(times)
    w = np.asarray(dist)
    floor = max(1e-12, floor_rel * w[0])
    below = np.flatnonzero(w <= floor)
    end = int(below[0]) if below.size else w.size
    if end < min_points:
        raise DegenerateFitError(f"degenerate fit: {end} usable points above the noise floor {floor:.3g}")
    slope, _ = np.polyfit(t[:end], np.log(w[:end]), 1)
    logger.debug("ergodicity fit on t in [0, {:.3g}] with {} points: rate {:.4g}", t[end - 1], end, -slope)
    return ErgodicityFit(float(-slope), t, w, end)


def ergodicity_rate(
    mu: Ensemble,
    model: ModelSpec,
    init1: Ensemble,
    init2: Ensemble,
    horizon: float,
    dt: float,
    noise: Optional[NoiseStream] = None,
    **kwargs,
) -> float:
    return ergodicity_fit(mu, model, init1, init2, horizon, dt, noise, **kwargs).rate


# ----------------------------------------------------------------------
# Averaged drift
# ----------------------------------------------------------------------


def averaged_drift(
    x: np.ndarray,
    mu: Ensemble,
    inv: InvariantEnsemble,
    model: ModelSpec,
    *,
    allow_unconverged: bool = False,
) -> np.ndarray:
    """(1/M) sum_z b(x, mu, z, inv.measure) over the invariant particles z."""
    if not inv.converged and not allow_unconverged:
        raise SolverError("averaged drift requested from an unconverged invariant ensemble")
    z = inv.measure.particles
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, model.n), (z.shape[0], model.n))
    values = np.asarray(model.b(xs, mu, z, inv.measure), dtype=float).reshape(z.shape[0], model.n)
    _require_finite(values, "non-finite drift", "averaged")
    return np.array([math.fsum(values[:, i]) / z.shape[0] for i in range(model.n)])


# ----------------------------------------------------------------------
# Cache
# ----------------------------------------------------------------------


def measure_key(mu: Ensemble) -> str:
    """SHA-256 of the lexicographically sorted particle list."""
    pts = as_particles(mu)
    ordered = pts[np.lexsort(pts.T[::-1])]
    digest = hashlib.sha256(np.ascontiguousarray(ordered).tobytes())
    digest.update(str(pts.shape).encode())
    return digest.hexdigest()


class InvariantCache:
    """Invariant ensembles keyed by the frozen slow law.

    An exact key hit or a cached law within ``reuse_factor * (1 + M2(mu)^(1/2))`` in W2
    is reused; otherwise a new solve is warm-started from the nearest cached ensemble.
    """

    def __init__(
        self,
        model: ModelSpec,
        cfg: InvariantSolverConfig = InvariantSolverConfig(),
        *,
        reuse_factor: float = 0.05,
        max_entries: int = 256,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.reuse_factor = reuse_factor
        self.max_entries = max_entries
        self._entries: "OrderedDict[str, InvariantEnsemble]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def _nearest(self, mu: Ensemble) -> tuple[Optional[InvariantEnsemble], float]:
        best, best_d = None, math.inf
        for entry in self._entries.values():
            if entry.frozen_mu.dim != mu.dim:
                continue
            d = float(wasserstein2(mu, entry.frozen_mu, n_projections=self.cfg.n_projections))
            if d < best_d:
                best, best_d = entry, d
        return best, best_d

    def get(self, mu: Ensemble) -> InvariantEnsemble:
        key = measure_key(mu)
        with self._lock:
            hit = self._entries.get(key)
            if hit is None:
                nearest, dist = self._nearest(mu)
                threshold = self.reuse_factor * (1.0 + math.sqrt(moment(mu, 2)))
                if nearest is not None and dist <= threshold:
                    hit = nearest
            if hit is not None:
                self.hits += 1
                return hit
            self.misses += 1

        noise = NoiseStream(derive_seed(self.cfg.seed, int(key[:15], 16)))
        warm = nearest.measure if nearest is not None else None
        logger.debug("invariant cache miss (warm start: {})", warm is not None)
        inv = invariant_measure(mu, self.model, self.cfg, gamma0=warm, noise=noise)
        with self._lock:
            self._entries[key] = inv
            while len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)
        return inv
