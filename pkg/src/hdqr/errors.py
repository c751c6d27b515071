"""Exception classes raised by hdqr."""


class HdqrError(Exception):
    """Base class for all package errors."""


class DomainError(HdqrError, ValueError):
    pass


class ZeroColumn(HdqrError, ValueError):
    pass


class DimensionError(HdqrError, ValueError):
    pass


class EmptySupport(HdqrError, ValueError):
    pass


class NotConverged(HdqrError, RuntimeError):
    pass


class DegenerateDesign(HdqrError, ValueError):
    pass


class RankDeficient(HdqrError, ValueError):
    pass


class PositivityError(HdqrError, ValueError):
    pass


class MissingBandwidth(HdqrError, ValueError):
    pass


class MissingQuantile(HdqrError, KeyError):
    pass


class DegenerateScore(HdqrError, ArithmeticError):
    pass


class EmptyInterval(HdqrError, ValueError):
    pass


class SingularGram(HdqrError, ArithmeticError):
    pass


class EmptyRegion(HdqrError):
    pass


class ZeroInstrument(HdqrError, ValueError):
    pass


class IdentificationError(HdqrError, ValueError):
    pass


class StageError(HdqrError):
    """Wraps a failure inside one pipeline stage.

    Attributes
    ----------
    stage : name of the stage that failed, e.g. ``"step1"``.
    cause : the original exception.
    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
