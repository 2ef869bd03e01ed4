"""Exception hierarchy shared by every module."""


class STFLError(Exception):
    """Base class for all package errors."""


class ConfigError(STFLError, ValueError):
    """Invalid configuration or precondition on user-supplied parameters."""


class ShapeError(STFLError, ValueError):
    """Tensor or image shapes do not conform."""


class NumericFault(STFLError, ArithmeticError):
    """A NaN or Inf appeared in a value that must be finite."""


class ContractError(STFLError, RuntimeError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class ProtocolError(STFLError, RuntimeError):
    """Federation protocol violation, such as aggregating mismatched layouts."""


class ReportError(STFLError, ValueError):
    """A report cannot be built from the supplied samples."""


class UndefinedCIError(ReportError):
    """A confidence interval was requested for fewer than two samples."""
