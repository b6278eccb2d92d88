"""Exception hierarchy.

Every error raised on purpose derives from :class:`XrayNetError`, so callers
(and the CLI) can separate data/config faults from programming bugs.
"""


class XrayNetError(Exception):
    """Base class for all errors raised by xraynet."""


# tensors / autodiff
class ShapeMismatch(XrayNetError, ValueError):
    pass


class NonFiniteInput(XrayNetError, ValueError):
    pass


class NonFiniteResult(XrayNetError, ArithmeticError):
    pass


class DomainError(XrayNetError, ValueError):
    pass


class NotScalar(XrayNetError, ValueError):
    pass


class DetachedGraph(XrayNetError, RuntimeError):
    pass


# layers
class EmptyOutput(XrayNetError, ValueError):
    pass


class DegenerateBatch(XrayNetError, ValueError):
    pass


class InvalidRate(XrayNetError, ValueError):
    pass


class LabelOutOfRange(XrayNetError, ValueError):
    pass


# model / weights
class InvalidConfig(XrayNetError, ValueError):
    pass


class InvalidK(InvalidConfig):
    pass


class MissingWeights(XrayNetError, FileNotFoundError):
    pass


class WeightShapeMismatch(XrayNetError, ValueError):
    pass


class FormatError(XrayNetError, ValueError):
    pass


class ChecksumMismatch(FormatError):
    pass


# data
class ParseError(XrayNetError, ValueError):
    """Malformed input file; ``path`` and ``line`` locate the fault when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class UnknownLabel(ParseError):
    pass


class EmptyImage(XrayNetError, ValueError):
    pass


class ClassTooSmall(XrayNetError, ValueError):
    pass


# harness / metrics
class EmptyDataset(XrayNetError, ValueError):
    pass


class NonFiniteLoss(XrayNetError, ArithmeticError):
    pass


class EmptyMatrix(XrayNetError, ValueError):
    pass


class EmptyInput(XrayNetError, ValueError):
    pass


class ConfigError(ParseError):
    pass
