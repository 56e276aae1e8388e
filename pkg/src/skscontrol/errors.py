"""Exception hierarchy shared by the solver, weight and control modules."""


class SKSError(Exception):
    """Base class for all package errors."""


class DimensionError(SKSError, ValueError):
    """Sequence or field length does not match its grid."""


class RangeError(SKSError, IndexError):
    """An operator needs indices that the source sequence does not define."""


class DomainError(SKSError, ValueError):
    """Evaluation point outside the domain of a weight function."""


class ConfigError(SKSError, ValueError):
    """Invalid parameters or configuration values."""


class NumericalFailure(SKSError, RuntimeError):
    """Non-finite values, singular factorizations or similar breakdowns."""

    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
        self.diagnostics = diagnostics or {}


class ConstructionError(SKSError, ValueError):
    """A weight object failed one of its audits."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PropertyFailure(SKSError, AssertionError):
    """A checked inequality or identity was violated."""
