"""Exception hierarchy.

Each error carries the CLI exit code it maps to: 1 usage, 2 data, 3 numeric.
"""


class XmdError(Exception):
    exit_code = 1


class ConfigError(XmdError, ValueError):
    """Invalid configuration, unknown key, or violated invariant."""


class ContractError(XmdError, ValueError):
    """A caller broke an operation's precondition."""


class DataError(XmdError):
    exit_code = 2


class ParseError(DataError, ValueError):
    pass


class MissingTargetError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnsupportedFormatError(DataError, ValueError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class InputTooShortError(DataError, ValueError):
    pass


class SequenceTooLongError(DataError, ValueError):
    pass


class IncompatibleCheckpointError(DataError, ValueError):
    pass


class NumericError(XmdError, ArithmeticError):
    exit_code = 3


class DimensionError(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass


class SingularSystemError(NumericError):
    pass


class DegenerateEmbeddingError(NumericError, ValueError):
    pass


class UndefinedCorrelationError(NumericError, ValueError):
    pass
