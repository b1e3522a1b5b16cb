"""Exceptions raised across the edos stack."""


class EdosError(Exception):
    """Base class for every error the command line reports as a failure."""


class DataFormatError(EdosError):
    """A dataset, corpus or matrix file does not have the expected layout."""


class LabelValidationError(EdosError, ValueError):
    """A label is unknown or violates the sexist/category/vector hierarchy."""

    def __init__(self, message: str, row_id: str | None = None):
        if row_id is not None:
            message = f"row {row_id}: {message}"
        super().__init__(message)
        self.row_id = row_id


class ConfigError(EdosError, ValueError):
    """Invalid configuration or experiment/task combination."""


class ShapeError(EdosError, ValueError):
    """Tensor shapes or token ids are inconsistent."""


class NumericalError(EdosError, ArithmeticError):
    """NaN values, diverged losses or non-deterministic functions."""


class CheckpointError(EdosError):
    """A checkpoint file is corrupt, of the wrong version or incomplete."""
