"""Exception types shared across the package."""


class PerceiverError(Exception):
    pass


class DimensionError(PerceiverError, ValueError):
    """Shapes of operands do not agree."""


class ConfigError(PerceiverError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DomainError(PerceiverError, ValueError):
    """An input value lies outside the domain an operation accepts."""


class StateError(PerceiverError, RuntimeError):
    """An object was used in a state that does not allow the call."""


class NonFiniteError(PerceiverError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class DivergenceError(PerceiverError, RuntimeError):
    """Training produced a non-finite loss."""
