"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class NeurotrackError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ArgumentError(NeurotrackError, ValueError):
    """An argument violates an operation's preconditions."""

    exit_code = 1


class DesignError(NeurotrackError):
    """A filter specification cannot be realized (e.g. order cap exceeded)."""

    exit_code = 3


class ShapeError(NeurotrackError, ValueError):
    """Tensor or window shapes are inconsistent."""

    exit_code = 2


class SpecError(NeurotrackError, ValueError):
    """A model specification is invalid."""

    exit_code = 1


class DegenerateInputError(NeurotrackError, ValueError):
    """A statistical test received input with no information (all zeros)."""

    exit_code = 3


class NumericError(NeurotrackError, FloatingPointError):
    """Training diverged or produced non-finite values."""

    exit_code = 3


class DataError(NeurotrackError):
    """A container is missing, corrupt, or inconsistent with its sidecar."""

    exit_code = 2


class PlanError(NeurotrackError, ValueError):
    """An experiment plan violates its invariants."""

    exit_code = 1
