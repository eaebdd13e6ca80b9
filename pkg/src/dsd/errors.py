"""Exception hierarchy shared by every subpackage."""


class DSDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DSDError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(DSDError, ArithmeticError):
    """A forward value became NaN or infinite."""


class ParameterError(DSDError, ValueError):
    """A scalar parameter is outside its legal range."""


class UsageError(DSDError, RuntimeError):
    """An API was called in a state where it cannot work."""


class VocabularyError(DSDError, KeyError):
    """A word or token id is not part of the caption vocabulary."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class ConfigError(DSDError, ValueError):
    """A scoring, tuning or model configuration is invalid."""


class TrainingError(DSDError, RuntimeError):
    """Optimisation diverged (non-finite loss)."""


class FormatError(DSDError, ValueError):
    """A checkpoint or dataset file is malformed."""
