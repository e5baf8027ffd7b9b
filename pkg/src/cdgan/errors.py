"""Exception hierarchy shared by every cdgan module."""


class CDGANError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CDGANError, ValueError):
    pass


class ConfigurationError(CDGANError, ValueError):
    pass


class FormatError(CDGANError, ValueError):
    pass


class SliceRangeError(CDGANError, IndexError):
    pass


class NumericError(CDGANError, ArithmeticError):
    """Raised when a loss or parameter becomes non-finite."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
