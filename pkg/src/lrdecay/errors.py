"""Exception types shared across the package."""


class LrDecayError(Exception):
    pass


class ValidationError(LrDecayError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes or lengths do not agree."""


class UndefinedStateError(LrDecayError):
    """Quantity requested from a state where it is not defined."""


class InvalidTransitionError(LrDecayError):
    """State machine was driven past a terminal state."""


class GenerationError(LrDecayError):
    """Dataset construction failed after bounded retries."""


class DegenerateStageError(LrDecayError, ZeroDivisionError):
    """Source accuracy did not change between consecutive stages."""


class ParseError(ValidationError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column
