"""Exception hierarchy shared by every subsystem."""


class MambaLiteError(Exception):
    """Base class for all package errors."""


class DimensionError(MambaLiteError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MambaLiteError, ValueError):
    """A model, mixer, or training configuration is invalid."""


class UsageError(MambaLiteError, ValueError):
    """An API was called with arguments outside its contract."""


class NumericalError(MambaLiteError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class CheckpointError(MambaLiteError, IOError):
    """A checkpoint could not be read or does not match the model."""
