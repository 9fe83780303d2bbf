"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class RevrirError(Exception):
    code = "error"
    exit_code = 1


class ValidationError(RevrirError, ValueError):
    code = "validation"
    exit_code = 2


class GeometryError(ValidationError):
    code = "geometry"


class SamplingError(RevrirError, RuntimeError):
    code = "sampling"
    exit_code = 3


class FormatError(ValidationError):
    code = "format"


class ConfigError(ValidationError):
    code = "config"


class LookupFailure(RevrirError, LookupError):
    code = "lookup"
    exit_code = 2


class StateError(RevrirError, RuntimeError):
    code = "state"
    exit_code = 2


class DataError(RevrirError):
    code = "data"
    exit_code = 3


class FeatureError(DataError):
    code = "feature"


class NumericError(RevrirError, FloatingPointError):
    code = "numeric"
    exit_code = 4


class HashMismatch(ValidationError):
    code = "hash-mismatch"


class MissingInput(DataError):
    code = "missing-input"
