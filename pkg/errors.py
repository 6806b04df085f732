"""
Exception hierarchy for the regularity diagnostics
"""
from typing import Optional


class RegdiagError(Exception):
    """Base class for every error raised by regdiag."""


class ConfigError(RegdiagError):
    """Invalid tolerance override, settings file or CLI option."""


class DomainError(RegdiagError):
    """x lies outside the problem's box domain beyond the clamping slack."""


class NonFiniteError(RegdiagError):
    """An evaluation produced NaN or Inf."""


class ParseError(RegdiagError):
    """A problem file could not be parsed.

    Args:
        message: What went wrong
        line: 1-based line in the source file, when known
        field: Dotted path of the offending field, when known
    """

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        self.message = message
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class SeamError(RegdiagError):
    """A field declared C0/C1/C2 jumps across a piece breakpoint."""


class NoConverge(RegdiagError):
    """Newton iteration hit its iteration cap."""


class SingularJacobian(RegdiagError):
    """The reduced KKT Jacobian became singular during the main Newton phase."""


class Rejected(RegdiagError):
    """A converged reduced-KKT solution violates a sign or feasibility check.

    Args:
        index: Constraint index (0-based) that was violated
        reason: Short description ("negative multiplier", "infeasible", ...)
    """

    def __init__(self, index: int, reason: str):
        self.index = index
        self.reason = reason
        super().__init__(f"constraint {index}: {reason}")


class InfeasibleError(RegdiagError):
    """A point (or a whole perturbed problem) is infeasible."""


class EmptyBandError(RegdiagError):
    """No grid point fell inside the activity band of a gradient scan."""


class ResolutionError(RegdiagError):
    """A stratum component was a single grid cell, so the grid is too coarse."""


class StepUnderflow(RegdiagError):
    """Continuation step shrank below the minimum step size."""


class SamplingError(RegdiagError):
    """Too few feasible samples were drawn for a growth estimate."""


class SingularSystem(RegdiagError):
    """A sensitivity system is singular to working precision.

    Args:
        sigma_min: Smallest singular value of the system matrix
        method: "REDUCED" or "COMPLEMENTARITY"
    """

    def __init__(self, sigma_min: float, method: str = ""):
        self.sigma_min = float(sigma_min)
        self.method = method
        label = f"{method} " if method else ""
        super().__init__(f"{label}system is singular (sigma_min={self.sigma_min:.3e})")


class NoStart(RegdiagError):
    """No starting minimizer could be found for a trace."""


class SchemaError(RegdiagError):
    """A report document does not match its JSON schema."""
