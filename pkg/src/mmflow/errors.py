"""Exception types shared across the package."""


class MMFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(MMFlowError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MMFlowError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class UsageError(MMFlowError, RuntimeError):
    """An API was called in an invalid state."""


class ConfigError(MMFlowError, ValueError):
    """A configuration is invalid or inconsistent."""
