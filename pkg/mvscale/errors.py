"""Exception hierarchy shared by every mvscale module."""

from __future__ import annotations


class MvscaleError(Exception):
    """Root of all errors raised by the toolkit."""


class ConfigError(MvscaleError, ValueError):
    """Invalid parameters, regime violations or misaligned grids."""


class AdmissibilityError(ConfigError):
    """A control path exceeds the admissible energy bound."""


class NumericalError(MvscaleError, ArithmeticError):
    """Base class for failures of the numerical machinery."""


class NonFiniteError(NumericalError):
    """A drift or a state became NaN or infinite."""

    def __init__(
        self,
        message: str,
        *,
        component: str | None = None,
        particle: int | None = None,
        time: float | None = None,
    ) -> None:
        self.component = component
        self.particle = particle
        self.time = time
        details = []
        if component is not None:
            details.append(f"component={component}")
        if particle is not None:
            details.append(f"particle={particle}")
        if time is not None:
            details.append(f"t={time:.6g}")
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))
        self.message = message

    def at_time(self, time: float) -> "NonFiniteError":
        return NonFiniteError(self.message, component=self.component, particle=self.particle, time=time)


class NotPsdError(NumericalError):
    """Matrix has a materially negative eigenvalue."""


class SingularDiffusionError(NumericalError):
    """Effective diffusion falls below the uniform ellipticity floor."""


class DegenerateFitError(NumericalError):
    """Too few usable points for a regression."""


class SolverError(NumericalError):
    """A nested solver failed at a given time."""

    def __init__(self, message: str, time: float | None = None) -> None:
        self.time = time
        super().__init__(message if time is None else f"{message} (t={time:.6g})")


class ReplayMismatchError(MvscaleError):
    """Re-executed artifacts differ from the recorded ones."""

    def __init__(self, filename: str, offset: int) -> None:
        self.filename = filename
        self.offset = offset
        super().__init__(f"{filename} diverges at byte offset {offset}")
