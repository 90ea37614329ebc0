"""Exception hierarchy shared by all modules."""


class QualityModelError(Exception):
    """Base class for every error raised by this package."""


# audio_io
class ParseError(QualityModelError):
    pass


class UnsupportedFormat(QualityModelError):
    pass


class ChannelError(QualityModelError):
    pass


class IoError(QualityModelError):
    pass


# dsp
class TooShort(QualityModelError):
    pass


class InvalidSignal(QualityModelError):
    pass


# model
class NotInitialized(QualityModelError):
    pass


class StateError(QualityModelError):
    pass


class ShapeError(QualityModelError, ValueError):
    pass


class EmptyInput(QualityModelError, ValueError):
    pass


# degrade
class SpecError(QualityModelError, ValueError):
    pass


class NoData(QualityModelError):
    pass


# training
class TrainingError(QualityModelError):
    pass


# metrics
class DegenerateSet(QualityModelError, ValueError):
    pass


class Undefined(QualityModelError, ValueError):
    pass
