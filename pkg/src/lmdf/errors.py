"""Exception types shared across the package."""


class LMDFError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LMDFError, ValueError):
    """Operand shapes disagree with an operation's contract."""


class DataValidationError(LMDFError, ValueError):
    """Input data violates a documented precondition."""


class TrackParseError(DataValidationError):
    """An annotation or landmark file could not be parsed.

    Carries the zero-based frame index of the offending record when known.
    """

    def __init__(self, message: str, frame_index: int | None = None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        super().__init__(message)
        self.frame_index = frame_index


class TrainingError(LMDFError, RuntimeError):
    """Training hit a non-recoverable numeric problem."""


class CheckpointError(LMDFError, RuntimeError):
    """Checkpoint file is missing, corrupt, or incompatible."""
