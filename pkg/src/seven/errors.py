"""Exception types shared across the package."""


class SevenError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(SevenError):
    """Operands have incompatible shapes; the message reports both."""


class DataFormatError(SevenError):
    """A binary or text artifact could not be parsed."""


class CheckpointError(DataFormatError):
    """A checkpoint file is corrupt, truncated, or version-mismatched."""


class ConfigError(SevenError):
    """Invalid configuration, hyperparameters, or command usage."""


class TrainingDivergedError(SevenError):
    """Training produced a non-finite loss and was aborted."""
