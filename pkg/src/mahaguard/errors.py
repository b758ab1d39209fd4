"""Exception hierarchy shared by every mahaguard module.

Two broad families matter to callers (and to the CLI exit codes):
``ValidationError`` for bad inputs and ``NumericalError`` for failures of
the numerics themselves (non-positive-definite covariance, diverging loss).
"""


class MahaguardError(Exception):
    """Base class for all mahaguard errors."""


class ValidationError(MahaguardError):
    """Invalid inputs: shapes, labels, parse failures, file-format violations."""


class NumericalError(MahaguardError):
    """The computation itself failed numerically."""


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(DimensionMismatch):
    """Gradient/cache arrays do not line up with the model parameters."""


class EmptyClass(ValidationError):
    def __init__(self, k: int):
        super().__init__(f"class {k} has no samples")
        self.k = k


class UnseenClass(ValidationError):
    def __init__(self, k: int):
        super().__init__(f"class {k} was never observed in any update")
        self.k = k


class EmptyBatch(ValidationError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class ClassOutOfRange(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class EmptyBank(ValidationError):
    pass


class EmptyScores(ValidationError):
    pass


class NonFiniteScore(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class InvalidParams(ValidationError):
    pass


class UnknownScorer(ValidationError):
    pass


class IoError(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class UnsupportedVersion(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class RaggedRows(ValidationError):
    def __init__(self, line: int, message: str = ""):
        super().__init__(message or f"line {line}: inconsistent number of fields")
        self.line = line


class ParseError(ValidationError):
    def __init__(self, line: int, column: int, message: str = ""):
        super().__init__(message or f"line {line}, column {column}: cannot parse value")
        self.line = line
        self.column = column
