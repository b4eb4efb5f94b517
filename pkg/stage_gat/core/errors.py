"""Exception hierarchy shared across the STAGE modules."""

from __future__ import annotations


class StageError(Exception):
    """Root of every error raised by stage_gat."""


class DimensionError(StageError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        rendered = " vs ".join("x".join(str(d) for d in shape) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class DegenerateRowError(StageError, ValueError):
    """A softmax row has no unmasked entry."""

    def __init__(self, row: int):
        super().__init__(f"row {row} is fully masked")
        self.row = row


class EmptyTapeError(StageError):
    """Backward was requested before anything was recorded."""


class NonFiniteError(StageError, ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class TemporalGapError(StageError, ValueError):
    """Clips handed to a window builder are not consecutive."""

    def __init__(self, previous: int, current: int):
        super().__init__(f"timestamps {previous} and {current} are not consecutive")
        self.previous = previous
        self.current = current


class DatasetFormatError(StageError, ValueError):
    """A dataset file or record violates the detection-feature format."""


class ConfigMismatchError(StageError, ValueError):
    """A checkpoint does not match the configuration or data it is used with."""


class DivergenceError(StageError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, checkpoint: str | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
