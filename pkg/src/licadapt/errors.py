"""Exception hierarchy. Each top-level family carries the CLI exit code."""


class LicError(Exception):
    exit_code = 1


class ConfigurationError(LicError):
    exit_code = 2


class DataError(LicError):
    exit_code = 3


class CodecError(LicError):
    exit_code = 4


class CompatibilityError(LicError):
    exit_code = 5


class DimensionError(CodecError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(CodecError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(CodecError, FloatingPointError):
    """NaN or Inf appeared in a forward or backward pass."""


class DivergenceError(NonFiniteError):
    pass


class ModelStateError(CodecError):
    pass


class FramingError(CodecError):
    """The byte stream is truncated, oversized or otherwise malformed."""


class NoOverlapError(ContractError):
    pass


class ArityError(ContractError):
    pass
