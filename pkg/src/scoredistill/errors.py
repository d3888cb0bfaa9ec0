"""Exception hierarchy shared across the package."""


class ScoreDistillError(Exception):
    """Base class for every error raised by scoredistill."""


class RangeError(ScoreDistillError, ValueError):
    """A time or parameter value fell outside its admissible range."""


class DimensionError(ScoreDistillError, ValueError):
    """Array shapes do not agree."""


class ConditionError(ScoreDistillError, ValueError):
    """A condition is malformed or has no mass."""


class ConfigError(ScoreDistillError, ValueError):
    """An experiment or distillation config violates its invariants."""


class ContractError(ScoreDistillError, ValueError):
    """A caller broke an operation's precondition (e.g. unshared noise)."""


class NumericError(ScoreDistillError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
