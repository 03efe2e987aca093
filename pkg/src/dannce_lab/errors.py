"""Exception types shared across the package."""


class LabError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(LabError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(InvalidInputError):
    """A file could not be parsed; the message carries ``path:line``."""


class ContractViolation(LabError, RuntimeError):
    """Internal contract broken, e.g. mismatched grids or a stale cache."""


class ResourceLimitError(LabError):
    """A computation would exceed a configured size cap."""


class TrainingDivergenceError(LabError, FloatingPointError):
    """Non-finite loss or gradient during optimisation."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class GenerationError(LabError, FloatingPointError):
    """Non-finite input gradient while generating cooperative examples."""

    def __init__(self, message, point_index=None):
        super().__init__(message)
        self.point_index = point_index


class DegenerateObjectError(LabError):
    """Candidate set for a bound's reference object is empty."""
