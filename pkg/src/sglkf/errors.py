"""Exception types shared across the package."""


class SGLKFError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SGLKFError, ValueError):
    pass


class NumericError(SGLKFError, ArithmeticError):
    pass


class ShapeMismatchError(SGLKFError, ValueError):
    pass


class SequencingError(SGLKFError, ValueError):
    pass


class FormatError(SGLKFError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
