"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
TrainingError -> 3.
"""


class SlmrecError(Exception):
    """Base class for package errors."""


class ConfigError(SlmrecError):
    """Invalid configuration, unknown keys, or incompatible settings."""


class DimensionError(SlmrecError, ValueError):
    """Tensor shapes incompatible with the requested primitive."""


class DataError(SlmrecError):
    """Problems with input data files or derived datasets."""


class DataFormatError(DataError):
    """Input file violates the expected format beyond tolerance."""


class SamplingError(DataError):
    """Negative sampling cannot satisfy its contract for a user."""


class TrainingError(SlmrecError):
    """Non-finite loss/gradients or other unrecoverable training failure."""


class EvaluationError(SlmrecError):
    """Evaluation encountered invalid scores or an unusable checkpoint."""


class CheckpointError(SlmrecError):
    """Checkpoint file is malformed or inconsistent with its manifest."""
