"""Exception types raised across the package."""


class MemkdError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MemkdError, ValueError):
    pass


class ContractError(MemkdError, ValueError):
    pass


class NumericError(MemkdError, ArithmeticError):
    pass


class SequenceTooShortError(MemkdError, ValueError):
    pass


class PairIndexError(MemkdError, IndexError):
    pass


class LabelError(MemkdError, ValueError):
    pass


class ParseError(MemkdError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingValueError(ParseError):
    pass


class UndefinedMetricError(MemkdError, ValueError):
    pass


class ModelFormatError(MemkdError):
    pass


class BadMagicError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class ConfigError(MemkdError, ValueError):
    pass


class TrainingDivergedError(MemkdError):
    pass


class RunError(MemkdError):
    pass
