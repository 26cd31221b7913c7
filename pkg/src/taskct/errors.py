"""Exception types shared across the package.

The CLI maps ConfigurationError/UsageError/DimensionError to exit code 1
(validation) and everything else to exit code 2 (runtime failure).
"""


class TaskCTError(Exception):
    pass


class ConfigurationError(TaskCTError):
    """Invalid configuration value or infeasible specification."""


class DimensionError(TaskCTError):
    """Array shape or size mismatch."""


class UsageError(TaskCTError):
    """API called against its contract (wrong head, unfrozen model, ...)."""


class DataError(TaskCTError):
    """Dataset ingestion, persistence or corruption problem."""


class TrainingError(TaskCTError):
    """Divergence or other failure inside a training run."""


class CheckpointError(TaskCTError):
    """Unreadable or inconsistent checkpoint file."""
