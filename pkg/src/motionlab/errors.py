"""Typed exceptions shared across the package.

Each exception that a CLI command can surface maps to one process exit
code; the mapping lives in cli.py.
"""


class MotionlabError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(MotionlabError):
    """An argument violates a documented precondition."""


class DegenerateMapError(InvalidArgumentError):
    """Numerator and denominator share a root, or the degree is < 2."""


class ChartError(MotionlabError):
    """A chart derivative hit a pole; caller should rotate and retry."""


class RootFindingError(MotionlabError):
    """Root refinement failed to reach the required residual."""


class ConditionBError(MotionlabError):
    """Weight oscillation too large relative to log(degree)."""


class CountAuditError(MotionlabError):
    """Periodic point enumeration does not match the algebraic count."""


class BudgetExceededError(MotionlabError):
    """Requested enumeration exceeds the configured budget."""

    def __init__(self, needed: int, budget: int, advice: str = ""):
        self.needed = needed
        self.budget = budget
        msg = f"needs {needed} points, budget is {budget}"
        if advice:
            msg += f"; {advice}"
        super().__init__(msg)


class MissingArtifactError(MotionlabError):
    """A verification step requires an output file that does not exist."""


class MassMismatchError(InvalidArgumentError):
    """Measures differ in total mass beyond the renormalization tolerance."""
