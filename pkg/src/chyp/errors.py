"""Exception hierarchy shared by all chyp modules."""


class ChypError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ChypError):
    """Invalid user-supplied configuration (CLI exit code 2)."""


# core
class ZeroVector(ChypError, ValueError):
    pass


class NegativeComponent(ChypError, ValueError):
    pass


class DegenerateIlluminant(ChypError, ValueError):
    pass


class GreenUnderflow(ChypError, ValueError):
    pass


# candidates
class EmptyInput(ChypError, ValueError):
    pass


class TooFewDistinctPoints(ChypError, ValueError):
    pass


class DegenerateExtent(ChypError, ValueError):
    pass


class EmDidNotConverge(ChypError, RuntimeError):
    pass


class DegenerateComponent(ChypError, RuntimeError):
    pass


# data
class ParseError(ChypError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingImageFile(ChypError, FileNotFoundError):
    pass


class BadIlluminant(ChypError, ValueError):
    pass


class AllMasked(ChypError, ValueError):
    pass


class BlackLevelExceedsSaturation(ChypError, ValueError):
    pass


class TooFewScenes(ChypError, ValueError):
    pass


class ZeroChannel(ChypError, ValueError):
    pass


# network
class BadWeightFile(ChypError, ValueError):
    pass


class NonFiniteActivation(ChypError, FloatingPointError):
    pass


class TraceMismatch(ChypError, ValueError):
    pass


class IncompatibleCheckpoint(ChypError, ValueError):
    pass


class HashMismatch(ChypError, ValueError):
    pass


# posterior
class LengthMismatch(ChypError, ValueError):
    pass


class NonFiniteLogit(ChypError, FloatingPointError):
    pass


# training
class MixedCameraBatch(ChypError, ValueError):
    pass


class NonFiniteLoss(ChypError, FloatingPointError):
    pass


# evaluation
class NonPositiveStatistic(ChypError, ValueError):
    pass
