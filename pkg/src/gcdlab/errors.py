"""Exception types shared across the package."""


class GcdLabError(Exception):
    """Base class for all package errors."""


class ShapeError(GcdLabError):
    """Operands have incompatible shapes."""


class DegenerateInputError(GcdLabError):
    """Input is empty, zero-norm, or otherwise unusable."""


class NumericError(GcdLabError):
    """Non-finite values where finite ones are required."""


class ConfigError(GcdLabError):
    """Invalid configuration values."""


class FormatError(GcdLabError):
    """Malformed or truncated file."""


class ProtocolError(GcdLabError):
    """Evaluation inputs violate the scoring protocol."""


class GenerationError(GcdLabError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingDivergedError(GcdLabError):
    """Loss became non-finite; carries epoch/batch diagnostics."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
