"""Typed exceptions shared across the package."""


class OccflowError(Exception):
    """Base class for all package errors."""


class DimensionError(OccflowError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(OccflowError):
    """A parameter value is outside its legal range."""


class FormatError(OccflowError):
    """A file does not conform to its declared binary format."""


class ConfigError(OccflowError):
    """A configuration value or combination is invalid."""


class TrainingDiverged(OccflowError):
    """Training loss became non-finite.

    Carries the path of the diagnostic dump written for the offending batch.
    """

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
