"""Exception hierarchy.

Everything raised on bad input derives from :class:`CaltuneError` so the CLI
can map it to exit code 2; :class:`NumericFailure` subclasses map to 3.
"""


class CaltuneError(ValueError):
    """Base class for input and contract violations."""


class NumericFailure(ArithmeticError):
    """Base class for internal numeric breakdowns (CLI exit code 3)."""


class ZeroVector(CaltuneError):
    pass


class NonPositiveTemperature(CaltuneError):
    pass


class NonFiniteScore(CaltuneError):
    pass


class DimensionMismatch(CaltuneError):
    pass


class EmptyRecordSet(CaltuneError):
    pass


class InvalidRange(CaltuneError):
    pass


class LengthMismatch(CaltuneError):
    pass


class ZeroVariance(CaltuneError):
    pass


class InsufficientSurvivors(CaltuneError):
    pass


class GenerationFailure(CaltuneError):
    pass


class MalformedLine(CaltuneError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


class InconsistentClassCount(MalformedLine):
    pass


class ConfigError(CaltuneError):
    def __init__(self, pointer: str, reason: str):
        super().__init__(f"{pointer or '/'}: {reason}")
        self.pointer = pointer
        self.reason = reason


class NonFiniteEvaluation(NumericFailure):
    pass


class NonFiniteGradient(NumericFailure):
    pass
