"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit code, so new errors should
subclass one of the four families below rather than ``Exception``.
"""


class MsiCnnError(Exception):
    pass


class ConfigError(MsiCnnError, ValueError):
    """Invalid configuration or argument (CLI exit code 2)."""


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class DataError(MsiCnnError):
    """Malformed or inconsistent data (CLI exit code 3)."""


class FormatError(DataError):
    """A binary container could not be parsed."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class PayloadLengthError(FormatError):
    pass


class NonFiniteError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class HeterogeneousShapeError(DataError):
    pass


class DegenerateSpectrumError(DataError):
    pass


class LeakageError(DataError):
    """An augmented sample would reach a validation or test split."""


class DivergenceError(MsiCnnError, ArithmeticError):
    """Training produced a non-finite loss (CLI exit code 4)."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
