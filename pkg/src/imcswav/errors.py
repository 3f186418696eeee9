"""Exception types raised across the package."""


class IMCError(Exception):
    """Base class for all package errors."""


class DimensionError(IMCError, ValueError):
    pass


class ParameterError(IMCError, ValueError):
    pass


class DegenerateRowError(IMCError, ValueError):
    """A row has (near) zero Euclidean norm and cannot be normalized."""


class NumericalError(IMCError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class GraphError(IMCError, RuntimeError):
    """Misuse of the differentiation tape (non-scalar root, double backward)."""


class ConfigError(IMCError, ValueError):
    pass


class ContainerError(IMCError, ValueError):
    """Malformed, truncated or incompatible container file."""
