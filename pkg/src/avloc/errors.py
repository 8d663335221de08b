"""Exception types shared across the package."""


class AVLocError(Exception):
    """Base class for all package errors."""


class ValidationError(AVLocError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes do not line up."""


class NumericalError(AVLocError, FloatingPointError):
    """A computation produced NaN or inf."""


class ParseError(AVLocError, ValueError):
    """An MLLM response could not be turned into captions."""


class CountMismatchError(ParseError):
    """Response parsed, but with the wrong number of foreground captions.

    Recoverable: callers retry the request.
    """

    def __init__(self, message, got, expected):
        super().__init__(message)
        self.got = got
        self.expected = expected


class IngestionError(AVLocError):
    """A dataset file could not be decoded."""

    def __init__(self, clip_id, reason):
        super().__init__(f"clip {clip_id}: {reason}")
        self.clip_id = clip_id
