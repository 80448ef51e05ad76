"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to a
category without inspecting messages.
"""


class MSAMError(Exception):
    exit_code = 1


class VolumeIOError(MSAMError):
    exit_code = 2


class MissingFile(VolumeIOError):
    pass


class CorruptHeader(VolumeIOError):
    pass


class ChecksumMismatch(VolumeIOError):
    pass


class NonFiniteData(VolumeIOError):
    pass


class UnwritablePath(VolumeIOError):
    pass


class ShapeMismatch(MSAMError, ValueError):
    exit_code = 3


class ConfigOutOfRange(MSAMError, ValueError):
    exit_code = 4


class UnknownTarget(ConfigOutOfRange):
    pass


class PromptError(MSAMError, ValueError):
    exit_code = 5


class EmptyPrompt(PromptError):
    pass


class OutOfBoundsPoint(PromptError):
    pass


class EmptyForeground(PromptError):
    pass


class InvalidProbability(MSAMError, ValueError):
    exit_code = 6


class NonFiniteActivation(MSAMError, FloatingPointError):
    exit_code = 7


class DivergenceError(NonFiniteActivation):
    pass


class DataError(MSAMError):
    exit_code = 8
