"""Exception hierarchy shared by every crossbuild module."""


class CrossbuildError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 2


class ContractError(CrossbuildError, ValueError):
    """A precondition of a public operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not conform for a tensor primitive."""


class NumericError(CrossbuildError, ArithmeticError):
    """A computation produced NaN or Inf."""

    exit_code = 3


class AlignmentError(ContractError):
    """Batch channels do not match the model; run align_channels first."""


class IngestionError(ContractError):
    """Raw input could not be turned into an hourly frame."""


class LeakageError(ContractError):
    """A scaler was fitted on, or applied to, data it must not see."""
