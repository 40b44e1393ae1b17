"""mvscale: numerical toolkit for slow/fast McKean-Vlasov systems.

Simulates interacting particle approximations of two-time-scale mean-field SDEs,
computes the averaged (law-of-large-numbers) limit through frozen invariant
measures and evaluates the explicit large-deviation rate functional around it.

Key sub-modules:

core.py         – Time scales, ensembles, model specs and the explicit Euler-Maruyama engine.
noise.py        – Counter-based Philox noise streams, reproducible for any worker count.
measures.py     – Moments, Wasserstein-2, Gibbs-weighted means, covariances, PSD roots.
models.py       – Bi-level CBO, multi-scale EKS, the linear benchmark and the assumption probe.
frozen.py       – Frozen fast dynamics, invariant ensembles, lifted pair, ergodicity rate.
averaging.py    – Averaged ODE, averaging error and the convergence-rate sweep.
ldp.py          – Q2, the rate functional, controlled runs, occupation measures, exit rates.
config.py       – Pydantic schema of the JSON experiment configuration.
artifacts.py    – CSV/JSON writers, run summaries and byte-level replay comparison.
experiments.py  – ExperimentRunner and replay.
"""

from .averaging import AveragedPath, AveragingError, RateReport, averaging_error, rate_sweep, solve_averaged
from .core import (
    AssumptionParams,
    Ensemble,
    ModelSpec,
    PathGrid,
    SimConfig,
    Taming,
    TimeScales,
    initial_ensembles,
    simulate,
    step_coupled,
    tamed_drift,
)
from .errors import (
    AdmissibilityError,
    ConfigError,
    DegenerateFitError,
    MvscaleError,
    NonFiniteError,
    NotPsdError,
    NumericalError,
    ReplayMismatchError,
    SingularDiffusionError,
    SolverError,
)
from .frozen import (
    InvariantCache,
    InvariantEnsemble,
    InvariantSolverConfig,
    averaged_drift,
    ergodicity_rate,
    invariant_measure,
    lifted_pair_simulate,
    simulate_frozen,
)
from .ldp import (
    ControlPath,
    controlled_simulate,
    exit_action_search,
    exit_probability,
    occupation_measure,
    q2_matrix,
    rate_functional,
)
from .measures import (
    covariance,
    cutoff_chi,
    moment,
    psd_sqrt,
    wasserstein2,
    weighted_mean_ell,
    weighted_mean_h,
)
from .models import (
    CboParams,
    EksParams,
    LinearClosedForm,
    assumption_probe,
    cbo_bilevel_model,
    eks_model,
    linear_benchmark_model,
    zero_model,
)
from .noise import Channel, NoiseStream

__all__ = [
    "AdmissibilityError",
    "AssumptionParams",
    "AveragedPath",
    "AveragingError",
    "CboParams",
    "Channel",
    "ConfigError",
    "ControlPath",
    "DegenerateFitError",
    "EksParams",
    "Ensemble",
    "InvariantCache",
    "InvariantEnsemble",
    "InvariantSolverConfig",
    "LinearClosedForm",
    "ModelSpec",
    "MvscaleError",
    "NoiseStream",
    "NonFiniteError",
    "NotPsdError",
    "NumericalError",
    "PathGrid",
    "RateReport",
    "ReplayMismatchError",
    "SimConfig",
    "SingularDiffusionError",
    "SolverError",
    "Taming",
    "TimeScales",
    "assumption_probe",
    "averaged_drift",
    "averaging_error",
    "cbo_bilevel_model",
    "controlled_simulate",
    "covariance",
    "cutoff_chi",
    "eks_model",
    "ergodicity_rate",
    "exit_action_search",
    "exit_probability",
    "initial_ensembles",
    "invariant_measure",
    "lifted_pair_simulate",
    "linear_benchmark_model",
    "moment",
    "occupation_measure",
    "psd_sqrt",
    "q2_matrix",
    "rate_functional",
    "rate_sweep",
    "simulate",
    "simulate_frozen",
    "solve_averaged",
    "step_coupled",
    "tamed_drift",
    "wasserstein2",
    "weighted_mean_ell",
    "weighted_mean_h",
    "zero_model",
]
