class CCBError(Exception):
    """Base class for all package errors."""


class ValidationError(CCBError, ValueError):
    pass


class DatasetParseError(CCBError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaVersionError(CCBError):
    pass


class LeakageError(CCBError):
    """Raised when a bias table would leak evaluation-split statistics."""


class DivergenceError(CCBError, RuntimeError):
    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {detail}")
