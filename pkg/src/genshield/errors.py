"""Exception hierarchy shared across the package."""


class GenShieldError(Exception):
    """Base class for all package errors."""


class ConfigError(GenShieldError):
    """Invalid configuration value or config file."""


class ArgumentError(GenShieldError, ValueError):
    """Invalid argument to an operation."""


class SchemaError(GenShieldError):
    """Dataset file does not match the canonical schema."""


class ParseError(GenShieldError):
    """Non-numeric or otherwise unparseable cell in a data file."""


class LabeledDataError(GenShieldError):
    """Unknown or inconsistent label in the input data."""


class ShapeError(GenShieldError):
    """Tensor shape incompatible with a layer or model."""


class StateError(GenShieldError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class PreconditionError(GenShieldError):
    """A documented precondition of an operation does not hold."""


class TrainingError(GenShieldError):
    """Non-finite loss/gradient or unlearnable training setup."""


class ModelFormatError(GenShieldError):
    """Model file has bad magic or malformed structure."""


class ModelVersionError(ModelFormatError):
    """Model file written with an unsupported format version."""


class ModelCorruptionError(ModelFormatError):
    """Model file fails its checksum or is truncated."""


class ModelIncompatibilityError(ModelFormatError):
    """Manifest and parameter payload disagree."""
