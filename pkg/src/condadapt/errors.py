"""Exception taxonomy shared by all modules."""


class CondAdaptError(Exception):
    """Base class for all package errors."""


class ShapeError(CondAdaptError):
    """Operands have incompatible dimensions."""


class ContractError(CondAdaptError):
    """A documented precondition was violated by the caller."""


class NumericalError(CondAdaptError):
    """A forward op produced NaN or Inf."""


class TrainingDivergedError(CondAdaptError):
    """Training aborted on a non-finite loss; carries diagnostic state."""

    def __init__(self, message, step=None, loss_tail=None):
        super().__init__(message)
        self.step = step
        self.loss_tail = list(loss_tail or [])


class NotFoundError(CondAdaptError, KeyError):
    """Lookup by id or descriptor found nothing."""


class CheckpointError(CondAdaptError):
    """Checkpoint container is corrupt or has the wrong format."""


class ConfigError(CondAdaptError):
    """Configuration is inconsistent or a training target was not reached."""


class DependencyError(CondAdaptError):
    """An upstream pipeline artifact is missing; names the command that makes it."""
