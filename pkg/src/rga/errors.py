"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """Gradient tape used out of protocol (empty, or already consumed)."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over a single element per channel."""


class DataError(RuntimeError):
    """Dataset layout or image file problem; message names the offending path."""


class ConfigError(ValueError):
    """Run configuration is malformed; message carries file/line context."""


class NumericError(RuntimeError):
    """Training produced a non-finite value."""


class OptimStateError(RuntimeError):
    """Optimizer stepped out of protocol (no backward pass pending)."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class BadVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was written for a different architecture."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends before the declared payload is complete."""
