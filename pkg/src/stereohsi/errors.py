"""Exception hierarchy shared by all pipeline stages."""


class HSIError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(HSIError, ValueError):
    """An object or argument violates a documented invariant."""


class FormatError(HSIError, ValueError):
    """A binary stream does not carry the expected magic or layout."""


class LengthError(FormatError):
    """A binary stream ended before the declared payload was read."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")


class CubeIOError(HSIError, OSError):
    """Writing to a byte sink failed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class CalibrationError(HSIError, ValueError):
    pass


class FusionError(HSIError, ValueError):
    pass


class DegenerateInputError(HSIError, ValueError):
    pass


class ParameterError(HSIError, ValueError):
    pass


class SplitError(HSIError, ValueError):
    pass


class ShapeError(HSIError, ValueError):
    pass


class NumericError(HSIError, ArithmeticError):
    pass


class TrainingError(HSIError, ValueError):
    pass
