"""Exception hierarchy shared by every module of the package."""


class DiresaError(Exception):
    """Base class for all package errors."""


class DimensionError(DiresaError, ValueError):
    pass


class ConfigError(DiresaError, ValueError):
    """Invalid configuration; ``path`` names the offending key when known."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class DegenerateError(DiresaError, ValueError):
    """Input is well-formed but mathematically degenerate (zero variance, single row, ...)."""


class StructureError(DiresaError, ValueError):
    """A tape, checkpoint or model does not match the structure it is used with."""


class DivergenceError(DiresaError, ArithmeticError):
    """Non-finite or runaway values appeared during integration or training.

    ``index`` is the offending parameter index or step, ``history`` the
    partial training history if one exists.
    """

    def __init__(self, message, index=None, history=None):
        super().__init__(message)
        self.index = index
        self.history = history


class FormatError(DiresaError, ValueError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingDivergence(DivergenceError):
    pass


class IntegrationDivergence(DivergenceError):
    pass
