"""
Exception hierarchy for simdim.

Every error carries the process exit code the CLI uses for it:
0 success, 1 generic failure, 2 config error, 3 budget/cap, 4 suite failure.
"""

from typing import Optional


class SimDimError(Exception):
    """Base class for all simdim errors."""
    exit_code = 1


class ConfigError(SimDimError):
    """Invalid or unreadable system configuration."""
    exit_code = 2


class BudgetExceeded(SimDimError):
    """Enumeration would exceed the configured product budget."""
    exit_code = 3

    def __init__(self, message: str, completed_n: Optional[int] = None, partial: Optional[list] = None):
        super().__init__(message)
        self.completed_n = completed_n
        # per-generation results computed before the budget ran out
        self.partial = partial or []


class StoppingCapExceeded(SimDimError):
    """A stopped walk did not reach its threshold within the step cap."""
    exit_code = 3


class SuiteFailure(SimDimError):
    """At least one verification suite failed."""
    exit_code = 4


class OrthogonalityError(SimDimError):
    """Rotation part drifts too far from O(d) to be repaired."""


class RotationBranchError(SimDimError):
    """Principal matrix logarithm undefined (rotation angle at pi)."""


class DegenerateAtom(SimDimError):
    """An atom with rho = 1, U = I and b != 0 has no fixed point."""


class AmbiguousDedup(SimDimError):
    """Two elements sit just outside the dedup tolerance."""


class TooFewSamples(SimDimError):
    """Sample cloud too small for the requested estimator."""


class ScaleRangeTooNarrow(SimDimError):
    """Fewer scales than the slope fit needs."""


class NotContractingOnAverage(SimDimError):
    """Lyapunov exponent is not negative."""


class PreconditionViolation(SimDimError):
    """Input violates a named inequality of the Taylor bound."""


class BlockPlanInfeasible(SimDimError):
    """Block plan cannot be realised on the given path."""


class ScaleMismatch(SimDimError):
    """Decompositions live on incompatible scales for concatenation."""


class EmptyCloud(SimDimError):
    """Point cloud with no points."""


class HypothesisUnverifiable(SimDimError):
    """Generator cannot certify its conditional-mean floor."""
