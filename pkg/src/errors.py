"""Error handling for decomposition, selection and training operations."""

from typing import Optional, Sequence


def shape_error_message(what: str, expected: Sequence[int], actual: Sequence[int]) -> str:
    """Generate a standardized error message for dimension mismatches."""
    return f"Shape mismatch for {what}: expected {tuple(expected)}, got {tuple(actual)}"


def invalid_action_error(action: object, n_actions: int) -> "InvalidActionError":
    """Create an InvalidActionError for an action outside [0, n_actions)."""
    return InvalidActionError(
        f"Invalid action {action!r}: expected an integer in [0, {n_actions})"
    )


def shape_error(what: str, expected: Sequence[int], actual: Sequence[int]) -> "ShapeError":
    """Create a ShapeError with a standardized message."""
    return ShapeError(shape_error_message(what, expected, actual))


class DecompositionError(Exception):
    """Base exception for every error raised by this library."""

    pass


class ConfigurationError(DecompositionError, ValueError):
    """Raised when a task, experiment or operation is configured with invalid values."""

    pass


class InvalidActionError(DecompositionError, ValueError):
    """Raised when an environment receives an action outside its action space."""

    pass


class ShapeError(DecompositionError, ValueError):
    """Raised when array dimensions do not chain or do not match an observation."""

    pass


class NumericError(DecompositionError, ArithmeticError):
    """Raised when parameters or losses become non-finite."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class UnsupportedArchitectureError(DecompositionError):
    """Raised when a network cannot be mapped to a neural tree."""

    pass


class EnumerationCapError(DecompositionError):
    """Raised when sub-policy enumeration would exceed the configured width cap."""

    pass


class WeightFileError(DecompositionError):
    """Base exception for unreadable or inconsistent weight files."""

    pass


class WeightFileParseError(WeightFileError):
    """Raised when a weight file is not well-formed text."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class WeightFileSchemaError(WeightFileError):
    """Raised when a weight file parses but its contents are inconsistent."""

    pass


class AggregationError(DecompositionError):
    """Raised when learning curves cannot be aggregated or exported."""

    pass


class PipelineError(DecompositionError):
    """Raised when a pipeline stage fails; names the stage and the seed."""

    def __init__(self, stage: str, seed: Optional[int], cause: BaseException):
        seed_msg = f" for seed {seed}" if seed is not None else ""
        super().__init__(f"Stage '{stage}' failed{seed_msg}: {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause

    def __reduce__(self):
        return (self.__class__, (self.stage, self.seed, self.cause))
