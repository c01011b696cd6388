"""Exception types shared across the package.

Error kinds are deliberately distinct so callers (and the CLI exit-code
mapping) can tell usage mistakes, bad data, and numerical blow-ups apart.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (repeated backward, detached output)."""


class NumericsError(ArithmeticError):
    """A NaN or Inf surfaced where finite values are required."""


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class DataError(Exception):
    """Base class for dataset / manifest problems."""


class MissingFileError(DataError):
    """A file referenced by a manifest does not exist."""

    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")


class ManifestError(DataError):
    """Manifest is malformed or has an unsupported schema version."""


class SizeMismatchError(DataError):
    """Paired images disagree on spatial size where they must not."""


class CheckpointError(DataError):
    """Checkpoint file is malformed or does not match the expected spec."""


class DegenerateLabelsError(ValueError):
    """Metric undefined: labels contain only one class (or no positives)."""
