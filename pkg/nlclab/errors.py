"""Exception hierarchy for nlclab.

Every library error belongs to one of three families, each carrying the exit
code the CLI reports for it. Concrete errors also subclass the matching
builtin so callers can catch ``ValueError`` / ``ArithmeticError`` directly.
"""

from typing import Iterable, List, Optional


class NlcLabError(Exception):
    """Base class for all nlclab errors."""

    exit_code = 1


class ValidationFailure(NlcLabError, ValueError):
    """Raised when an input, config or flag fails validation."""

    exit_code = 2


class NumericalGuardError(NlcLabError, ArithmeticError):
    """Raised when a numerical guard trips (singularity, stiffness, budget)."""

    exit_code = 3


class OutputError(NlcLabError, OSError):
    """Raised when results cannot be written or read back."""

    exit_code = 4


# -- validation family -------------------------------------------------------


class ConfigError(ValidationFailure):
    """Raised when an experiment config is malformed.

    Holds every violation found, not just the first one.
    """

    def __init__(
        self,
        violations: Iterable[str],
        line: Optional[int] = None,
        column: Optional[int] = None,
    ) -> None:
        self.violations: List[str] = list(violations)
        self.line = line
        self.column = column
        super().__init__("; ".join(self.violations))


class InvalidDimensionError(ValidationFailure):
    """Raised when a spin space dimension is below 2."""


class DimensionMismatchError(ValidationFailure):
    """Raised when vectors or operators of different dimension are combined."""


class ScheduleCoverageError(ValidationFailure):
    """Raised when a field schedule does not cover the requested time."""


class GridError(ValidationFailure):
    """Raised when a time grid is too short or does not contain a needed point."""


class InvalidOutcomeError(ValidationFailure):
    """Raised when an outcome label is unknown or has zero probability."""


class ExperimentShapeError(ValidationFailure):
    """Raised when an experiment cannot be mapped to its action dual."""


# -- numerical family --------------------------------------------------------


class SingularWeightError(NumericalGuardError):
    """Raised when the anomaly weight 1/(gamma_s^2 + alpha_a^2) diverges."""


class CertainOutcome(SingularWeightError):
    """Raised when a target sum diverges because the outcome is certain."""


class SingularSystemError(NumericalGuardError):
    """Raised when the branch decomposition system cannot be solved."""


class DegenerateBasisError(NumericalGuardError):
    """Raised when the final eigenbasis is not unique."""

    def __init__(self, eigenvalues: Iterable[float]) -> None:
        self.eigenvalues = [float(v) for v in eigenvalues]
        super().__init__(
            f"degenerate final eigenbasis, eigenvalues={self.eigenvalues}"
        )


class AnomalyBudgetError(NumericalGuardError):
    """Raised when a requested anomaly exceeds the NLC phase budget."""


class ZeroNormError(NumericalGuardError):
    """Raised when a zero vector cannot be parameterized."""
