"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class EmptyBatchError(RuntimeError):
    """No usable elements left after masking (all pixels ignored, no anchors, ...)."""


class FormatError(ValueError):
    """Malformed file content; message carries the byte offset where parsing failed."""


class IoError(OSError):
    """Filesystem failure surfaced by a command (unwritable output directory, ...)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the step."""


class CheckpointMismatchError(RuntimeError):
    """Checkpoint does not match the network; message names the first mismatched parameter."""
