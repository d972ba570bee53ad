"""Exception types shared across the package."""


class WkvSegError(Exception):
    """Base class for all package errors."""


class DimensionError(WkvSegError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(WkvSegError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(WkvSegError, ValueError):
    """A model or layer configuration is invalid."""


class ValidationError(WkvSegError, ValueError):
    """User-supplied data (prompts, files) failed validation."""


class NonFiniteError(WkvSegError, FloatingPointError):
    """An operation produced NaN or Inf."""
