"""Shared exception types."""


class ParseError(ValueError):
    """Malformed task file. Carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EncodingError(ValueError):
    """A story cannot be encoded against the given vocabulary."""


class NumericError(ArithmeticError):
    """A numeric computation produced non-finite values or failed to converge."""


class TrainingFault(RuntimeError):
    """Training hit a non-finite loss or gradient; names the culprit."""
