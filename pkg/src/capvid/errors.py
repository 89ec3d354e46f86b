"""Exception hierarchy shared by all capvid modules.

Errors are grouped by how the CLI maps them to exit codes:
configuration problems (exit 2), data/format problems (exit 3),
and runtime failures (exit 4).
"""


class CapvidError(Exception):
    """Base class for all capvid errors."""


class ConfigError(CapvidError):
    """Invalid or inconsistent configuration."""


class SpecError(ConfigError):
    """Invalid synthetic dataset specification."""


class FormatError(CapvidError):
    """Malformed binary table, sidecar, or manifest file."""


class DataError(CapvidError):
    """Data that is structurally valid but numerically unusable
    (NaN/Inf rows, zero-norm vectors, degenerate means)."""


class ShapeError(CapvidError):
    """Dimension mismatch between vectors, tables, or models."""


class IoError(CapvidError):
    """Filesystem failure while reading or writing an artifact."""


class MissingCaptionerError(CapvidError):
    """A selection strategy names a captioner absent from the pool."""


class EmptyBatchError(CapvidError):
    """A training batch with zero samples."""


class EmptyDatasetError(CapvidError):
    """No videos available across the supplied manifests."""


class DivergenceError(CapvidError):
    """Training produced a non-finite loss.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class EvalError(CapvidError):
    """Evaluation request that cannot be satisfied (e.g. missing
    ground-truth column for a query)."""


class TruncatedResultWarning(UserWarning):
    """Fewer results available than requested; all rows returned."""
