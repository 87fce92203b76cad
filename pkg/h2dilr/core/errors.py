"""Exception hierarchy.

Validation problems subclass ValueError so callers (and the CLI) can treat
them uniformly; numerical blow-ups subclass FloatingPointError.
"""


class H2DiLRError(Exception):
    """Base class for all package errors."""


class ShapeError(H2DiLRError, ValueError):
    """Operand shapes do not fit the primitive or model geometry."""


class NonFiniteError(H2DiLRError, FloatingPointError):
    """A NaN or Inf was produced or received."""


class RoutingError(H2DiLRError, ValueError):
    """Token routing is inconsistent with the quantized tensors."""


class ConfigError(H2DiLRError, ValueError):
    """Run configuration is invalid (unknown key, conflicting override, bad value)."""


class DatasetError(H2DiLRError, ValueError):
    """Dataset is missing, empty, or cannot be split."""


class CheckpointError(H2DiLRError, ValueError):
    """Checkpoint is corrupt or does not match the current run."""


class SubjectError(H2DiLRError, ValueError):
    """Subject id is not registered or batches mix subjects."""
