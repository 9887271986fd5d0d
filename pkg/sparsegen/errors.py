# sparsegen/errors.py
from typing import Optional


class SparseGenError(Exception):
    """Base class for every error raised by sparsegen."""


class DimensionError(SparseGenError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, message: str, axis: Optional[str] = None):
        self.axis = axis
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)


class ConfigurationError(SparseGenError, ValueError):
    """Architecture or run configuration is invalid."""


class DivergenceError(SparseGenError, RuntimeError):
    """A Langevin chain left the admissible region."""

    def __init__(self, step: int, norm: float, example_index: Optional[int] = None):
        self.step = step
        self.norm = norm
        self.example_index = example_index
        where = f" for example {example_index}" if example_index is not None else ""
        super().__init__(
            f"Langevin chain diverged at step {step}{where} (norm {norm:.3g})"
        )

    def with_example(self, example_index: int) -> "DivergenceError":
        return DivergenceError(self.step, self.norm, example_index)


class MissingTraceError(SparseGenError, ValueError):
    """A forward trace without recorded masks was given."""


class ActivationIndexError(SparseGenError, IndexError):
    """A surviving-activation index is out of range."""


class DatasetError(SparseGenError, ValueError):
    """Dataset could not be assembled."""


class CheckpointError(SparseGenError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        super().__init__(message)


class CheckpointManifestError(CheckpointError):
    pass


class StageError(SparseGenError, RuntimeError):
    """Cooperative training failed inside a labelled stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
