"""Exception types shared across the package."""


class KfacoptError(Exception):
    """Base class for all library errors."""


class DimensionError(KfacoptError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericalError(KfacoptError, ArithmeticError):
    """A numerical routine failed: non-finite values, indefinite matrix, no convergence."""


class SizeError(KfacoptError, ValueError):
    """A dense-oracle size cap was exceeded."""


class StateError(KfacoptError, RuntimeError):
    """Operation invoked on mismatched or incomplete state."""


class InputError(KfacoptError, ValueError):
    """Malformed user-supplied data."""


class ConfigError(KfacoptError, ValueError):
    """Invalid configuration value."""
