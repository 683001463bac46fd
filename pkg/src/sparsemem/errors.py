"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter combination."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class LengthError(ValueError):
    """A token sequence does not fit the model's context window."""


class EmptyLossError(ValueError):
    """A masked loss was requested with every position masked out."""


class ContractError(RuntimeError):
    """An API was called in violation of its precondition."""


class CheckpointError(IOError):
    """A checkpoint file is truncated, corrupted, or from another format version."""


class TrainingFailure(RuntimeError):
    """Training did not reach its target within the step budget.

    ``curve`` holds the recorded metric history so the caller can dump it.
    """

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = list(curve or [])
