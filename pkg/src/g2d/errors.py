"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 2, PipelineError -> 3,
NumericalError -> 4.
"""


class G2DError(Exception):
    """Base class for all library errors."""


class ConfigError(G2DError, ValueError):
    """Invalid hyperparameters, dataset specs or plan files."""


class DimensionError(G2DError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(G2DError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DataError(G2DError, ValueError):
    """Labels or targets outside the range the task allows."""


class PipelineError(G2DError, RuntimeError):
    """A required artifact (teacher cache, checkpoint, dataset) is missing or stale."""


class NumericalError(G2DError, ArithmeticError):
    """Non-finite values appeared in a forward or backward pass."""


class TrainingError(NumericalError):
    """Training diverged; carries the epoch and a diagnostic snapshot."""

    def __init__(self, message, epoch=None, snapshot=None):
        super().__init__(message)
        self.epoch = epoch
        self.snapshot = snapshot or {}
