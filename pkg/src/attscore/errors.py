"""Exception hierarchy shared by the library and the CLI."""


class AttScoreError(Exception):
    """Base class for all attscore errors."""

    exit_code = 1


class ValidationError(AttScoreError, ValueError):
    exit_code = 2


class LayoutError(ValidationError):
    """Vector length or block dimensions do not match a layout."""


class ConfigError(ValidationError):
    pass


class EvaluationError(ValidationError):
    """Trial/score sets that cannot be evaluated (e.g. a missing class)."""


class FormatError(AttScoreError):
    """Malformed on-disk file."""

    exit_code = 3


class NumericalError(AttScoreError, ArithmeticError):
    exit_code = 4


class DataError(NumericalError):
    """Non-finite values in input data."""


class DegenerateVectorError(NumericalError):
    """Norm or variance below the degeneracy threshold."""


class TrainingDivergedError(NumericalError):
    pass
