"""Exception types shared across the package."""


class SteamError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(SteamError, ValueError):
    """Incompatible or invalid tensor shapes."""


class ParameterError(SteamError, ValueError):
    """An argument lies outside its allowed range."""


class EmptyNeighborhoodError(SteamError, ValueError):
    """A softmax row has every entry masked out."""

    def __init__(self, msg: str = "empty neighborhood"):
        super().__init__(msg)


class FormatError(SteamError, ValueError):
    """Malformed binary input (dataset or checkpoint)."""


class ConfigError(SteamError, ValueError):
    """Invalid model/training configuration."""


class CheckpointError(FormatError):
    """Checkpoint cannot be loaded into the current configuration."""


class TrainingError(SteamError, RuntimeError):
    """Training diverged (non-finite loss)."""


class ContractError(SteamError, ValueError):
    """A caller violated a documented precondition (e.g. non-scalar gradcheck target)."""
