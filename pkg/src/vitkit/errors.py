"""Exception hierarchy.

Validation errors (bad configs, shapes, files) map to CLI exit code 1;
everything else derived from VitError is a runtime failure (exit code 2).
"""


class VitError(Exception):
    pass


class ValidationError(VitError):
    pass


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class DTypeError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class EvaluationError(VitError):
    """A function under test produced a non-finite value."""


class TrainingError(VitError):
    pass


class ConsistencyError(VitError):
    """Two execution modes that must agree numerically did not."""
