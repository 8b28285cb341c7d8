"""Exception hierarchy shared across the package."""


class GaitAgeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GaitAgeError, ValueError):
    """Invalid configuration: bad shapes, bad hyperparameters, bad keys."""


class DomainError(GaitAgeError, ValueError):
    """Value outside the domain an operation is defined on."""


class AgeRangeError(DomainError):
    """Age outside the configured rank range."""


class NonFiniteError(GaitAgeError, FloatingPointError):
    """A tensor contains NaN or Inf."""


class IngestError(GaitAgeError):
    """A data file could not be read or parsed."""


class TrainingError(GaitAgeError, RuntimeError):
    """Training cannot continue (non-finite loss or gradients)."""


class CheckpointError(GaitAgeError):
    """A checkpoint file is missing, corrupt, or incompatible."""
