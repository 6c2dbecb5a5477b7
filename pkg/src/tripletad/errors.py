"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
I/O and dataset-layout problems exit 2, numeric aborts exit 3.
"""


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""


class ConfigError(ValueError):
    """Invalid configuration: bad option values, empty training pools, etc."""


class NumericError(ArithmeticError):
    """Non-finite values showed up where the math requires finite ones."""


class LayoutError(OSError):
    """A dataset directory tree does not match the expected layout."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, bad version, or otherwise unparseable payload."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared payload does."""


class FingerprintMismatchError(CheckpointError):
    """Stored architecture fingerprint disagrees with the reconstructed one."""


class UndefinedAucError(ValueError):
    """ROC AUC requested for a sample that lacks one of the two labels."""
