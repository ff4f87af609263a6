"""Exception types shared across the package."""


class PRNetError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(PRNetError, ValueError):
    """Tensor shapes or channel counts do not satisfy an operator's contract."""


class InvalidArgument(PRNetError, ValueError):
    """An argument is outside its valid domain (zero stride, odd size, ...)."""


class InvalidState(PRNetError, RuntimeError):
    """An operation was called before its prerequisites exist."""


class NonFiniteError(PRNetError, FloatingPointError):
    """A NaN or Inf appeared; the message names the producing op."""


class ConfigError(PRNetError, ValueError):
    """A model, dataset or training configuration is inconsistent."""


class TensorFileError(PRNetError, OSError):
    """A tensor file is missing or corrupt; the message names path and offset."""
