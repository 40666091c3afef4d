"""Exception hierarchy shared by the library and the CLI."""


class FGFMError(Exception):
    """Base class for all library errors."""


class DimensionError(FGFMError, ValueError):
    pass


class SelectionError(FGFMError, ValueError):
    pass


class ConfigError(FGFMError, ValueError):
    pass


class UsageError(FGFMError, ValueError):
    pass


class SpecError(FGFMError, ValueError):
    pass


class EvaluationError(FGFMError, ValueError):
    pass


class NonFiniteError(FGFMError, FloatingPointError):
    pass


class TrainingError(FGFMError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(FGFMError, ValueError):
    """Malformed binary or text file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
