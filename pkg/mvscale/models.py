"""Model zoo: bi-level consensus optimisation, multi-scale ensemble Kalman sampler,
the linear benchmark with its closed forms, and a numerical assumption probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import integrate

from .core import AssumptionParams, Ensemble, ModelSpec, Taming
from .errors import ConfigError
from .measures import (
    batch_diag,
    covariance,
    cutoff_chi,
    moment,
    psd_sqrt,
    wasserstein2,
    weighted_mean_ell,
    weighted_mean_h,
)
from .noise import Channel, NoiseStream

EllFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
HFn = Callable[[np.ndarray], np.ndarray]
GradFn = Callable[[np.ndarray], np.ndarray]


# ----------------------------------------------------------------------
# Objective registry
# ----------------------------------------------------------------------


def shifted_quadratic_ell(scale: float = 2.0) -> EllFn:
    """ell(x, y) = |x - scale*y|^2, minimised over x at x = scale*y."""

    def ell(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.sum((np.asarray(x) - scale * np.asarray(y)) ** 2, axis=-1)

    return ell


def quadratic_h(center: float = 1.0) -> HFn:
    def h(y: np.ndarray) -> np.ndarray:
        return np.sum((np.asarray(y) - center) ** 2, axis=-1)

    return h


def cubic_potential_grad(y: np.ndarray) -> np.ndarray:
    """Gradient |y|^2 y of Phi(y) = |y|^4 / 4."""
    y = np.asarray(y, dtype=float)
    return np.sum(y * y, axis=-1, keepdims=True) * y


def no_potential_grad(y: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(y, dtype=float))


ELL_REGISTRY: Dict[str, Callable[..., EllFn]] = {"shifted_quadratic": shifted_quadratic_ell}
H_REGISTRY: Dict[str, Callable[..., HFn]] = {"quadratic": quadratic_h}
# name -> (gradient, growth exponent q)
POTENTIAL_REGISTRY: Dict[str, Tuple[GradFn, float]] = {
    "cubic": (cubic_potential_grad, 4.0),
    "none": (no_potential_grad, 2.0),
}


def lookup(registry: Dict[str, Any], name: str, kind: str) -> Any:
    try:
        return registry[name]
    except KeyError:
        raise ConfigError(f"unknown {kind} '{name}' (known: {sorted(registry)})") from None


# ----------------------------------------------------------------------
# Bi-level consensus-based optimisation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CboParams:
    alpha: float = 50.0
    beta: float = 50.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    sigma1: float = 0.3
    R0: float = 2.0
    n: int = 1
    m: int = 1
    ell: Optional[EllFn] = None
    h: Optional[HFn] = None
    grad_phi: Optional[GradFn] = None
    potential_order: float = 4.0
    # user estimate of the Lipschitz constant of the weighted mean in W2
    c_alpha_lip: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.alpha > 0 or not self.beta > 0:
            raise ConfigError("alpha and beta must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3, self.sigma1) < 0:
            raise ConfigError("lambda1, lambda2, lambda3 and sigma1 must be non-negative")
        if not self.R0 > 0:
            raise ConfigError("R0 must be positive")
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be positive")
        if not self.stability_margin > 0:
            raise ConfigError(
                f"need 2*lambda1 > sigma1^2*lambda1^2 + 1, got lambda1={self.lambda1}, sigma1={self.sigma1}"
            )
        if self.ell is None:
            object.__setattr__(self, "ell", shifted_quadratic_ell())
        if self.h is None:
            object.__setattr__(self, "h", quadratic_h())
        if self.grad_phi is None:
            object.__setattr__(self, "grad_phi", cubic_potential_grad)

    @property
    def stability_margin(self) -> float:
        """2 lambda1 - sigma1^2 lambda1^2 - 1."""
        return 2.0 * self.lambda1 - self.sigma1**2 * self.lambda1**2 - 1.0


def _cbo_assumptions(p: CboParams) -> AssumptionParams:
    margin = p.stability_margin
    k2 = 0.0
    if p.lambda2 > 0:
        c_lip = 1.0 if p.c_alpha_lip is None else p.c_alpha_lip
        k2 = (1.0 + p.sigma1**2) * p.lambda2**2 * c_lip
        if p.c_alpha_lip is None:
            logger.warning(
                "lambda2={} cannot be certified small enough: no estimate of the weighted-mean Lipschitz constant",
                p.lambda2,
            )
        elif k2 >= margin:
            logger.warning(
                "lambda2={} too large: (1+sigma1^2) lambda2^2 C = {:.4g} >= stability margin {:.4g}",
                p.lambda2,
                k2,
                margin,
            )
        k2 = min(k2, 0.5 * margin)
    k0 = 2.0 * p.lambda3 if p.potential_order > 2 else 0.0
    return AssumptionParams(
        kappa=max(2.0, p.potential_order),
        q=max(2.0, p.potential_order),
        K0=k0,
        K0_tilde=k0,
        K1=margin,
        K2=k2,
        gamma_growth=0.0,
        c1=0.0,
    )


def cbo_bilevel_model(p: CboParams, *, ldp: bool = False) -> ModelSpec:
    """Slow outer CBO on ell(., y*) coupled to a fast inner CBO on h.

    b = -(x - M_alpha^ell), sigma = diag(x - M_alpha^ell),
    f = -(lambda1 y - lambda2 M_beta^h + lambda3 grad_phi(y)),
    g = sigma1/sqrt(2) diag(chi_R0(lambda1 y - lambda2 M_beta^h)).
    """
    if ldp and not p.lambda3 > 0:
        raise ConfigError("large-deviation runs of the CBO model need lambda3 > 0")

    # b and sigma see the same (mu, nu) pair within a step; keep the last consensus point
    last: Dict[str, Any] = {}

    def consensus(mu: Ensemble, nu: Ensemble) -> np.ndarray:
        hit = last.get("value")
        if hit is not None and hit[0] is mu and hit[1] is nu:
            return hit[2]
        point = weighted_mean_ell(mu, nu, p.ell, p.alpha, p.beta, p.h)
        last["value"] = (mu, nu, point)
        return point

    def inner_signal(y: np.ndarray, nu: Ensemble) -> np.ndarray:
        return p.lambda1 * y - p.lambda2 * weighted_mean_h(nu, p.h, p.beta)

    def b(x, mu, y, nu):
        return -(x - consensus(mu, nu))

    def sigma(x, mu, y, nu):
        return batch_diag(x - consensus(mu, nu))

    def f(mu, y, nu):
        return -(inner_signal(y, nu) + p.lambda3 * p.grad_phi(y))

    def g(mu, y, nu):
        return (p.sigma1 / math.sqrt(2.0)) * batch_diag(cutoff_chi(inner_signal(y, nu), p.R0))

    return ModelSpec(
        name="cbo",
        n=p.n,
        m=p.m,
        d1=p.n,
        d2=p.m,
        b=b,
        sigma=sigma,
        f=f,
        g=g,
        assumptions=_cbo_assumptions(p),
        sigma_depends_on_y=False,
        default_taming=Taming.DRIFT_TAMED,
        params={"cbo": p},
    )


def cbo_consensus(model: ModelSpec, mu: Ensemble, nu: Ensemble) -> Tuple[np.ndarray, np.ndarray]:
    """(M_alpha^ell(mu, nu), M_beta^h(nu)) for a model built by ``cbo_bilevel_model``."""
    p: CboParams = model.params["cbo"]
    return weighted_mean_ell(mu, nu, p.ell, p.alpha, p.beta, p.h), weighted_mean_h(nu, p.h, p.beta)


# ----------------------------------------------------------------------
# Multi-scale ensemble Kalman sampler
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class EksParams:
    n: int = 1

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError("EKS dimension must be >= 1")


def eks_model(p: EksParams) -> ModelSpec:
    """Covariance-driven slow/fast pair on R^n x R^n."""

    def b(x, mu, y, nu):
        return -x @ covariance(nu) + y

    def sigma(x, mu, y, nu):
        return psd_sqrt(covariance(mu)) + psd_sqrt(covariance(nu))

    def f(mu, y, nu):
        return -2.0 * y - np.sum(y * y, axis=1, keepdims=True) * y - y @ covariance(mu)

    def g(mu, y, nu):
        return psd_sqrt(covariance(nu))

    return ModelSpec(
        name="eks",
        n=p.n,
        m=p.n,
        d1=p.n,
        d2=p.n,
        b=b,
        sigma=sigma,
        f=f,
        g=g,
        assumptions=AssumptionParams(kappa=4.0, q=4.0, K0=2.0, K0_tilde=1.0, K1=3.0, K2=2.0),
        sigma_depends_on_y=False,
        default_taming=Taming.DRIFT_TAMED,
        params={"eks": p},
    )


# ----------------------------------------------------------------------
# Linear benchmark
# ----------------------------------------------------------------------


def linear_benchmark_model(a: float = 1.0, c: float = 1.0, k: float = 1.0, s: float = 1.0) -> ModelSpec:
    """b = -a x + c y, sigma = s, f = -k y, g = sqrt(2); the frozen law is N(0, 1/k)."""
    if not a > 0 or not k > 0:
        raise ConfigError("linear benchmark needs a > 0 and k > 0")
    sig = np.array([[float(s)]])
    g_const = np.array([[math.sqrt(2.0)]])

    def b(x, mu, y, nu):
        return -a * x + c * y

    def sigma(x, mu, y, nu):
        return sig

    def f(mu, y, nu):
        return -k * y

    def g(mu, y, nu):
        return g_const

    return ModelSpec(
        name="linear",
        n=1,
        m=1,
        d1=1,
        d2=1,
        b=b,
        sigma=sigma,
        f=f,
        g=g,
        assumptions=AssumptionParams(kappa=2.0, q=2.0, K1=2.0 * k, K2=0.0, c1=float(s) ** 2),
        sigma_depends_on_y=False,
        params={"a": float(a), "c": float(c), "k": float(k), "s": float(s)},
    )


@dataclass(frozen=True)
class LinearClosedForm:
    """Exact averaged path, frozen law and rate functional of the linear benchmark."""

    a: float
    c: float
    k: float
    s: float

    @classmethod
    def from_model(cls, model: ModelSpec) -> "LinearClosedForm":
        if model.name != "linear":
            raise ConfigError(f"closed forms exist only for the linear benchmark, not '{model.name}'")
        return cls(**{key: model.params[key] for key in ("a", "c", "k", "s")})

    @property
    def invariant_variance(self) -> float:
        return 1.0 / self.k

    def averaged_path(self, x0: float, times: np.ndarray) -> np.ndarray:
        return x0 * np.exp(-self.a * np.asarray(times, dtype=float))

    def rate(self, phi: Callable[[float], float], dphi: Callable[[float], float], horizon: float) -> float:
        """(1/(2 s^2)) int_0^T (phi' + a phi)^2 dt by adaptive quadrature."""
        value, _ = integrate.quad(lambda t: (dphi(t) + self.a * phi(t)) ** 2, 0.0, horizon, limit=200)
        return value / (2.0 * self.s**2)

    def exit_action(self, radius: float, tau: float) -> float:
        """Cheapest action to move the deviation from 0 to ``radius`` at time ``tau``."""
        if not tau > 0:
            raise ConfigError("exit time must be positive")
        return radius**2 * self.a / (self.s**2 * (1.0 - math.exp(-2.0 * self.a * tau)))

    def exit_deviation(self, radius: float, tau: float, times: np.ndarray) -> np.ndarray:
        """Optimal deviation r sinh(a t)/sinh(a tau) up to tau, then free relaxation."""
        t = np.asarray(times, dtype=float)
        rise = radius * np.sinh(self.a * np.minimum(t, tau)) / math.sinh(self.a * tau)
        return np.where(t <= tau, rise, radius * np.exp(-self.a * (t - tau)))


def zero_model(n: int = 1, m: int = 1) -> ModelSpec:
    """All four coefficients vanish; every state is a fixed point."""

    def b(x, mu, y, nu):
        return np.zeros_like(x)

    def sigma(x, mu, y, nu):
        return np.zeros((n, n))

    def f(mu, y, nu):
        return np.zeros_like(y)

    def g(mu, y, nu):
        return np.zeros((m, m))

    return ModelSpec(
        name="zero", n=n, m=m, d1=n, d2=m, b=b, sigma=sigma, f=f, g=g, sigma_depends_on_y=False
    )


# ----------------------------------------------------------------------
# Assumption probe
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSample:
    x: np.ndarray
    mu: Ensemble
    y: np.ndarray
    nu: Ensemble


@dataclass(frozen=True)
class GaussianProbeSampler:
    """Random states of uniformly distributed radius and small Gaussian ensembles."""

    n: int
    m: int
    x_radius: float = 10.0
    y_radius: float = 10.0
    ensemble_size: int = 16
    ensemble_scale: float = 1.0

    def _point(self, rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 0 else np.eye(dim)[0]
        return radius * rng.uniform() * direction

    def __call__(self, rng: np.random.Generator) -> ProbeSample:
        x = self._point(rng, self.n, self.x_radius)
        y = self._point(rng, self.m, self.y_radius)
        mu = Ensemble(self.ensemble_scale * rng.standard_normal((self.ensemble_size, self.n)))
        nu = Ensemble(self.ensemble_scale * rng.standard_normal((self.ensemble_size, self.m)))
        return ProbeSample(x, mu, y, nu)


@dataclass
class ProbeReport:
    n_samples: int
    fast_dissipativity_max: float
    fitted: Dict[str, float]
    slow_coercivity_max: float
    monotonicity_max: float
    g_growth_max: float
    g_bounded_max: float
    ellipticity_min: float
    violations: Dict[str, int] = field(default_factory=dict)
    issues: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    def as_dict(self) -> Dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "fast_dissipativity_max": self.fast_dissipativity_max,
            "fitted": dict(self.fitted),
            "slow_coercivity_max": self.slow_coercivity_max,
            "monotonicity_max": self.monotonicity_max,
            "g_growth_max": self.g_growth_max,
            "g_bounded_max": self.g_bounded_max,
            "ellipticity_min": self.ellipticity_min,
            "violations": dict(self.violations),
            "issues": list(self.issues),
            "ok": self.ok,
        }


def _growth_violations(values: np.ndarray, radii: np.ndarray, radius: float, rel_tol: float) -> int:
    """Outer-shell samples exceeding the core maximum; bounded functionals should not grow."""
    core = radii <= 0.5 * radius
    if core.all() or not core.any():
        return 0
    bound = float(values[core].max())
    return int(np.count_nonzero(values[~core] > bound + rel_tol * (1.0 + abs(bound))))


def _fit_constants(D: np.ndarray, ynorm: np.ndarray, m2_nu: np.ndarray, q: float) -> Dict[str, float]:
    # D ~ C - K0 |y|^q - K1 |y|^2 + K2 M2(nu)
    columns = [np.ones_like(D), -(ynorm**2), m2_nu]
    if q != 2.0:
        columns.insert(1, -(ynorm**q))
    coef, *_ = np.linalg.lstsq(np.column_stack(columns), D, rcond=None)
    if q != 2.0:
        C, K0, K1, K2 = coef
    else:
        (C, K1, K2), K0 = coef, 0.0
    return {"C": float(C), "K0": float(K0), "K1": float(K1), "K2": float(K2)}


def assumption_probe(
    model: ModelSpec,
    sampler: Optional[Callable[[np.random.Generator], ProbeSample]] = None,
    n_samples: int = 256,
    *,
    seed: int = 0,
    growth_tol: float = 0.1,
) -> ProbeReport:
    """Evaluate the dissipativity, coercivity, growth and ellipticity functionals on samples.

    Report-only: a clean report is evidence that the declared constants are plausible,
    not a proof.
    """
    if n_samples < 4:
        raise ConfigError("assumption probe needs at least 4 samples")
    sampler = sampler or GaussianProbeSampler(model.n, model.m)
    rng = NoiseStream(seed).generator(Channel.PROBE)
    A = model.assumptions

    D = np.empty(n_samples)
    ynorm = np.empty(n_samples)
    xnorm = np.empty(n_samples)
    m2_nu = np.empty(n_samples)
    slow_ratio = np.empty(n_samples)
    mono = np.empty(n_samples)
    g_growth = np.empty(n_samples)
    g_bounded = np.empty(n_samples)
    ellip = np.empty(n_samples)

    for j in range(n_samples):
        s1, s2 = sampler(rng), sampler(rng)
        y = s1.y.reshape(1, model.m)
        x = s1.x.reshape(1, model.n)
        f1, g1 = model.fast_coefficients(s1.mu, y, s1.nu)
        b1, sig1 = model.slow_coefficients(x, s1.mu, y, s1.nu)

        ynorm[j] = float(np.linalg.norm(y))
        xnorm[j] = float(np.linalg.norm(x))
        m2_nu[j] = moment(s1.nu, 2)
        g_sq = float(np.sum(g1 * g1))
        D[j] = 2.0 * float(np.sum(f1 * y)) + g_sq

        outer = 1.0 + xnorm[j] ** 2 + moment(s1.mu, 2) + m2_nu[j]
        slow_ratio[j] = (2.0 * float(np.sum(b1 * x)) - A.K0_tilde * ynorm[j] ** A.q) / outer

        # monotonicity on a pair sharing the slow law
        y2 = s2.y.reshape(1, model.m)
        f2, g2 = model.fast_coefficients(s1.mu, y2, s2.nu)
        dy = y - y2
        dg = g1 - g2
        w2_sq = float(wasserstein2(s1.nu, s2.nu)) ** 2
        lhs = 2.0 * float(np.sum((f1 - f2) * dy)) + float(np.sum(dg * dg))
        rhs = -A.K1 * float(np.sum(dy * dy)) + A.K2 * w2_sq
        scale = abs(lhs) + A.K1 * float(np.sum(dy * dy)) + A.K2 * w2_sq
        mono[j] = (lhs - rhs) / (1.0 + scale)

        g_growth[j] = g_sq / (ynorm[j] ** (2.0 * A.gamma_growth) + m2_nu[j] + 1.0)
        g_bounded[j] = g_sq / (m2_nu[j] + 1.0)
        ssT = sig1[0] @ sig1[0].T
        ellip[j] = float(np.linalg.eigvalsh(0.5 * (ssT + ssT.T)).min())

    residual = D + A.K0 * ynorm**A.q + A.K1 * ynorm**2 - A.K2 * m2_nu
    y_radius = float(getattr(sampler, "y_radius", ynorm.max()))
    x_radius = float(getattr(sampler, "x_radius", xnorm.max()))
    violations = {
        "fast_dissipativity": _growth_violations(residual, ynorm, y_radius, growth_tol),
        "slow_coercivity": _growth_violations(slow_ratio, xnorm, x_radius, growth_tol),
        "monotonicity": int(np.count_nonzero(mono > 1e-9)),
        "g_growth": _growth_violations(g_growth, ynorm, y_radius, growth_tol),
        "g_bounded": _growth_violations(g_bounded, ynorm, y_radius, growth_tol),
        "ellipticity": int(np.count_nonzero(ellip < A.c1 * (1.0 - 1e-9))) if A.c1 > 0 else 0,
    }
    report = ProbeReport(
        n_samples=n_samples,
        fast_dissipativity_max=float(residual.max()),
        fitted=_fit_constants(D, ynorm, m2_nu, A.q),
        slow_coercivity_max=float(slow_ratio.max()),
        monotonicity_max=float(mono.max()),
        g_growth_max=float(g_growth.max()),
        g_bounded_max=float(g_bounded.max()),
        ellipticity_min=float(ellip.min()),
        violations=violations,
        issues=A.ldp_issues(),
    )
    if not report.ok:
        logger.warning("assumption probe for {} flagged {}", model.name, {k: v for k, v in violations.items() if v})
    return report
