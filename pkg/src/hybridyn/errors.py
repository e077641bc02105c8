"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, range, invariant)."""


class SingularMatrixError(ArithmeticError):
    """A linear solve hit a (numerically) singular matrix."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class TrackingDivergence(RuntimeError):
    """The simulated plant left the tracking tube around its reference."""


class InfeasibleTrajectory(ValueError):
    """A requested motion cannot be time-parameterised within the sample grid."""


class RankDeficientError(ArithmeticError):
    """A least-squares system does not determine its unknowns."""


class MissingArtifact(FileNotFoundError):
    """A pipeline stage needs the output of another stage that has not been run."""


class TaskFailure(RuntimeError):
    """A task ran but missed its success criterion (e.g. peg success rate)."""
