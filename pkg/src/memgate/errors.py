"""Exception hierarchy shared by every memgate module."""


class MemgateError(Exception):
    """Base class for all library errors."""


class DimensionError(MemgateError, ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(MemgateError, ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(MemgateError, FloatingPointError):
    """NaN or Inf reached a module boundary."""


class DegenerateDenominatorError(MemgateError, ZeroDivisionError):
    """Normalized readout hit a denominator below eps."""


class TrainingDivergedError(MemgateError, RuntimeError):
    """Training produced a non-finite loss.

    ``diagnostics`` carries the step, alpha and per-parameter gradient norms
    observed at the failing step.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
