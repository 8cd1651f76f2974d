"""Exception hierarchy shared by every ctpseg module."""


class CtpSegError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(CtpSegError, ValueError):
    pass


class EmptyShape(CtpSegError, ValueError):
    pass


class DomainError(CtpSegError, ValueError):
    pass


class NotScalar(CtpSegError, ValueError):
    pass


class NonFiniteGradient(CtpSegError, FloatingPointError):
    pass


class EmptyOutput(CtpSegError, ValueError):
    pass


class BinTooSmall(CtpSegError, ValueError):
    pass


class DegenerateBatch(CtpSegError, ValueError):
    pass


class WrongChannelCount(CtpSegError, ValueError):
    pass


class ConfigInvalid(CtpSegError, ValueError):
    pass


class NoMatch(CtpSegError, KeyError):
    pass


class VersionMismatch(CtpSegError):
    pass


class ArchitectureMismatch(VersionMismatch):
    """Checkpoint architecture tag differs from the requested build."""


class CorruptFile(CtpSegError):
    pass


class NonBinaryLabel(CtpSegError, ValueError):
    pass


class WeightOutOfRange(CtpSegError, ValueError):
    pass


class NegativeGamma(CtpSegError, ValueError):
    pass


class EmptyDataset(CtpSegError, ValueError):
    pass


class CorruptHeader(CtpSegError):
    pass


class UnknownVersion(CtpSegError):
    pass


class TooFewSubjects(CtpSegError, ValueError):
    pass


class EmptySplit(CtpSegError, ValueError):
    pass


class EmptySurface(CtpSegError, ValueError):
    pass


class EmptyGroup(CtpSegError, ValueError):
    pass


class NonFiniteLoss(CtpSegError, FloatingPointError):
    pass


class IncompatibleCheckpoint(CtpSegError):
    pass


class EmptyEnsemble(CtpSegError, ValueError):
    pass


class HeterogeneousInputs(CtpSegError, ValueError):
    pass
