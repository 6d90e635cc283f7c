"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    pass


class UnsupportedSize(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class DegenerateBatch(ValueError):
    pass


class NumericalError(RuntimeError):
    """Raised when a non-finite value shows up in a loss or a gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
