"""JSON experiment configuration.

Validated with pydantic; every section converts itself into the frozen runtime
dataclasses used by the library.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union, get_args

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import ModelSpec, SimConfig, TimeScales
from .errors import ConfigError
from .frozen import InvariantSolverConfig
from .models import (
    ELL_REGISTRY,
    H_REGISTRY,
    POTENTIAL_REGISTRY,
    CboParams,
    EksParams,
    cbo_bilevel_model,
    eks_model,
    linear_benchmark_model,
    lookup,
    zero_model,
)

ExperimentKind = Literal[
    "simulate",
    "cbo-optimize",
    "averaging-rate",
    "frozen-invariant",
    "ldp-rate",
    "controlled-run",
    "probe",
]
EXPERIMENTS = get_args(ExperimentKind)
U64 = Annotated[int, Field(ge=0, lt=2**64)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ----------------------------------------------------------------------
# Models
# ----------------------------------------------------------------------


class LinearModelConfig(_Section):
    """b = -a x + c y, sigma = s, f = -k y, g = sqrt(2)."""

    name: Literal["linear"]
    a: float = 1.0
    c: float = 1.0
    k: float = 1.0
    s: float = 1.0

    def build(self, ldp: bool = False) -> ModelSpec:
        return linear_benchmark_model(self.a, self.c, self.k, self.s)


class CboModelConfig(_Section):
    name: Literal["cbo"]
    alpha: float = 50.0
    beta: float = 50.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    sigma1: float = 0.3
    R0: float = 2.0
    n: int = 1
    m: int = 1
    ell: str = "shifted_quadratic"
    ell_scale: float = 2.0
    h: str = "quadratic"
    h_center: float = 1.0
    potential: Literal["cubic", "none"] = "cubic"
    c_alpha_lip: Optional[float] = None

    @field_validator("ell")
    @classmethod
    def _known_ell(cls, value: str) -> str:
        if value not in ELL_REGISTRY:
            raise ValueError(f"unknown objective '{value}'")
        return value

    @field_validator("h")
    @classmethod
    def _known_h(cls, value: str) -> str:
        if value not in H_REGISTRY:
            raise ValueError(f"unknown objective '{value}'")
        return value

    def params(self) -> CboParams:
        grad, q = lookup(POTENTIAL_REGISTRY, self.potential, "potential")
        return CboParams(
            alpha=self.alpha,
            beta=self.beta,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            sigma1=self.sigma1,
            R0=self.R0,
            n=self.n,
            m=self.m,
            ell=lookup(ELL_REGISTRY, self.ell, "objective")(self.ell_scale),
            h=lookup(H_REGISTRY, self.h, "objective")(self.h_center),
            grad_phi=grad,
            potential_order=q,
            c_alpha_lip=self.c_alpha_lip,
        )

    def build(self, ldp: bool = False) -> ModelSpec:
        return cbo_bilevel_model(self.params(), ldp=ldp)


class EksModelConfig(_Section):
    name: Literal["eks"]
    n: int = 1

    def build(self, ldp: bool = False) -> ModelSpec:
        return eks_model(EksParams(self.n))


class ZeroModelConfig(_Section):
    name: Literal["zero"]
    n: int = 1
    m: int = 1

    def build(self, ldp: bool = False) -> ModelSpec:
        return zero_model(self.n, self.m)


ModelConfig = Annotated[
    Union[LinearModelConfig, CboModelConfig, EksModelConfig, ZeroModelConfig],
    Field(discriminator="name"),
]


# ----------------------------------------------------------------------
# Numerics
# ----------------------------------------------------------------------


class TimeScalesConfig(_Section):
    epsilon: float
    delta: float
    separation: float = 0.1

    def to_runtime(self) -> TimeScales:
        return TimeScales(self.epsilon, self.delta, self.separation)


class SimulationConfig(_Section):
    dt_macro: float
    horizon: float
    fast_substep_factor: float = 0.1
    n_particles: int = 1000
    n_reps: int = 1
    # unset defers to the model (tamed for the consensus models)
    taming: Optional[Literal["none", "drift_tamed"]] = None
    fast_init_scale: float = 1.0
    slow_init_scale: float = 0.0

    def to_runtime(self, seed: int, n_jobs: int = 1) -> SimConfig:
        return SimConfig(
            dt_macro=self.dt_macro,
            horizon=self.horizon,
            fast_substep_factor=self.fast_substep_factor,
            seed=seed,
            n_particles=self.n_particles,
            n_reps=self.n_reps,
            taming=self.taming,
            n_jobs=n_jobs,
            fast_init_scale=self.fast_init_scale,
            slow_init_scale=self.slow_init_scale,
        )


class InvariantConfig(_Section):
    n_particles: int = 2000
    dt: float = 0.01
    tol: float = 0.05
    check_lag: float = 1.0
    max_time: float = 50.0
    taming: Optional[Literal["none", "drift_tamed"]] = None
    antithetic: bool = True
    n_projections: int = 64
    n_tagged: int = 1024
    init_scale: float = 1.0
    # synchronous-coupling run of the frozen-invariant experiment
    ergodicity_horizon: float = Field(default=5.0, gt=0)

    def to_runtime(self, seed: int) -> InvariantSolverConfig:
        return InvariantSolverConfig(seed=seed, **self.model_dump(exclude={"ergodicity_horizon"}))


# ----------------------------------------------------------------------
# Experiment sections
# ----------------------------------------------------------------------


class SweepConfig(_Section):
    epsilons: List[float] = Field(default_factory=lambda: [0.02, 0.04, 0.08, 0.16])
    delta_power: float = 3.0
    n_boot: int = 1000


class PerturbationConfig(_Section):
    """Test path Xbar + amplitude * psi with psi(0) = 0."""

    kind: Literal["sine", "power"] = "sine"
    amplitude: float = 0.5
    frequency: float = Field(default=1.0, gt=0)

    def shape(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """psi and psi' on ``times``: A sin(w t) or A t^w."""
        t = np.asarray(times, dtype=float)
        A, w = self.amplitude, self.frequency
        if self.kind == "sine":
            return A * np.sin(w * t), A * w * np.cos(w * t)
        return A * t**w, A * w * np.power(t, w - 1.0, where=t > 0, out=np.zeros_like(t))


class ExitConfig(_Section):
    epsilons: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    radii: List[float] = Field(default_factory=lambda: [0.5, 0.5, 0.5])
    n_tau: int = Field(default=50, ge=1)

    @field_validator("radii")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if any(r <= 0 for r in value):
            raise ValueError("exit radii must be positive")
        return value

    @model_validator(mode="after")
    def _paired(self) -> "ExitConfig":
        if len(self.radii) != len(self.epsilons):
            raise ValueError("exit radii and epsilons must pair up")
        return self


class LdpConfig(_Section):
    averaged_dt: float = 1e-3
    scheme: Literal["euler", "heun"] = "euler"
    defect_correction: bool = True
    perturbations: List[PerturbationConfig] = Field(default_factory=lambda: [PerturbationConfig()])
    exit: Optional[ExitConfig] = None


class ControlConfig(_Section):
    """Constant control h = value on [0, T + tail]; ``value=None`` is the zero control."""

    value: Optional[List[float]] = None
    admissible_bound: Optional[float] = None
    share_companion_noise: bool = False
    # defaults to the occupation window width
    tail: Optional[float] = None
    thinning: int = Field(default=1, ge=1)
    histogram_bins: int = Field(default=40, ge=1)


class ProbeConfig(_Section):
    n_samples: int = 256
    x_radius: float = 10.0
    y_radius: float = 10.0
    ensemble_size: int = 16
    ensemble_scale: float = 1.0


class ExperimentConfig(_Section):
    experiment: ExperimentKind
    model: ModelConfig
    time_scales: TimeScalesConfig = Field(default_factory=lambda: TimeScalesConfig(epsilon=0.1, delta=0.01))
    sim: SimulationConfig = Field(default_factory=lambda: SimulationConfig(dt_macro=0.01, horizon=1.0))
    invariant: InvariantConfig = Field(default_factory=InvariantConfig)
    x0: List[float] = Field(default_factory=lambda: [1.0])
    seed: U64 = 0
    output_dir: Optional[str] = None
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    ldp: LdpConfig = Field(default_factory=LdpConfig)
    control: ControlConfig = Field(default_factory=ControlConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON config; every failure becomes a ``ConfigError``."""
    try:
        raw = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        return ExperimentConfig.model_validate_json(raw)
    except ValidationError as err:
        raise ConfigError(f"invalid config {path}:\n{err}") from err
