"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract
    (shape mismatch, out-of-bounds index, wrong length)."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent or out of range."""


class GraphStateError(RuntimeError):
    """The autodiff graph was used in an invalid order, e.g. a second
    backward pass without a new forward pass."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf from finite inputs."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss; carries the epoch/batch where."""

    def __init__(self, epoch: int, batch: int, message: str = ""):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}"
            + (f": {message}" if message else "")
        )
