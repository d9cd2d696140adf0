"""Exception types shared across the package."""


class ExemplarError(Exception):
    """Base class for all package errors."""


class DegenerateInput(ExemplarError):
    pass


class InsufficientTexture(ExemplarError):
    pass


class ParseError(ExemplarError):
    """Malformed text input. ``position`` is a character offset or (line, column)."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class ShapeMismatch(ExemplarError):
    pass


class NonFiniteLoss(ExemplarError):
    """Training diverged. ``state`` holds the last parameters with a finite loss."""

    def __init__(self, message, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history


class ImageTooSmall(ExemplarError):
    pass


class DegenerateLabels(ExemplarError):
    pass


class ZeroFeature(ExemplarError):
    pass


class InvalidEllipse(ExemplarError):
    pass


class OutOfBounds(ExemplarError):
    pass


class EmptyGroundTruth(ExemplarError):
    pass
