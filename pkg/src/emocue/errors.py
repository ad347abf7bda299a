"""Exception hierarchy shared by every emocue module.

Each exception carries the CLI exit code it maps to, so the command layer
can translate failures without a lookup table of its own.
"""


class EmocueError(Exception):
    exit_code = 1


class DimensionError(EmocueError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 5


class GeometryError(EmocueError, ValueError):
    """A window, kernel or rectangle does not fit where it must."""

    exit_code = 5


class NumericError(EmocueError, ValueError):
    exit_code = 5


class DomainError(EmocueError, ValueError):
    exit_code = 5


class CorrespondenceError(EmocueError, ValueError):
    """Parameter and gradient sets disagree on names or shapes."""

    exit_code = 5


class ConfigError(EmocueError, ValueError):
    exit_code = 5


class StructureError(EmocueError, ValueError):
    exit_code = 5


class ParseError(EmocueError, ValueError):
    exit_code = 3

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class SchemaError(ParseError):
    pass


class UnsupportedFeatureError(ParseError):
    pass


class ValidationError(ParseError):
    pass


class FormatError(EmocueError, ValueError):
    """Weights file is corrupt, truncated or of the wrong version."""

    exit_code = 4


class ShapeError(FormatError):
    """Weights file tensors do not match the requested network config."""


class IntegrityError(EmocueError, ValueError):
    exit_code = 4
