"""Exception types shared across the package."""


class FedDistillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedDistillError, ValueError):
    """Invalid configuration value or shape/dimension mismatch against an architecture."""


class InputError(FedDistillError, ValueError):
    """Invalid argument to an operation (bad labels, mismatched layouts, empty sets)."""


class PartitionError(FedDistillError):
    """A dataset cannot be split the way the partition spec asks."""


class ProtocolError(FedDistillError):
    """An evaluation protocol precondition was violated."""


class TrainingDivergenceError(FedDistillError):
    """A training loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class RoundError(FedDistillError):
    """A communication round was aborted; ``cause`` holds the failing sub-operation's error."""

    def __init__(self, round_index: int, strategy: str, cause: Exception):
        super().__init__(f"round {round_index} ({strategy}) aborted: {type(cause).__name__}: {cause}")
        self.round = round_index
        self.strategy = strategy
        self.cause = cause
