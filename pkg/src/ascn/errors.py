"""Exception hierarchy shared by every ascn module."""


class ASCNError(Exception):
    """Base class for all library errors."""


class ParseError(ASCNError):
    def __init__(self, message, line=0):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidParam(ASCNError, ValueError):
    pass


class DegenerateCloud(ASCNError):
    """Raised when a cloud has too few points for the requested operation."""


class DegenerateCloudWarning(UserWarning):
    pass


class NumericalError(ASCNError, ArithmeticError):
    pass


class DimensionMismatch(ASCNError, ValueError):
    pass


class ConfigError(ASCNError, ValueError):
    pass


class VersionError(ASCNError):
    pass


class CorruptModel(ASCNError):
    pass


class ClassMismatch(ASCNError):
    """A model and a dataset disagree on the number of classes."""
