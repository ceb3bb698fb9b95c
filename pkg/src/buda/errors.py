"""Exception types shared across the package."""


class BudaError(Exception):
    """Base class for all package errors."""


class ShapeError(BudaError, ValueError):
    """Operand shapes are incompatible for a primitive."""


class NumericError(BudaError, FloatingPointError):
    """A forward pass produced NaN or Inf."""


class ContractError(BudaError, ValueError):
    """A precondition of an operation was violated."""


class ScheduleExhausted(BudaError, RuntimeError):
    """The polynomial learning-rate schedule has no iterations left."""


class FormatError(BudaError, ValueError):
    """A dataset or checkpoint file is malformed."""
