"""Exception types shared across the package."""


class SemisegError(Exception):
    """Base class for all package errors."""


class DimensionError(SemisegError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SemisegError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class LabelError(SemisegError, ValueError):
    """A class id is outside the vocabulary range."""


class ConfigError(SemisegError, ValueError):
    """Invalid configuration value or key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class AlignmentError(SemisegError, KeyError):
    """Embedding rows cannot be aligned to the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(SemisegError, ValueError):
    """A file on disk could not be parsed."""

    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line


class CapacityError(SemisegError, ValueError):
    """More ground-truth objects than prediction slots."""


class NumericalError(SemisegError, FloatingPointError):
    """A loss or parameter became non-finite."""
