"""Exception types.

Every error carries an ``exit_code`` so the command line can map failures to
the documented codes: 2 usage, 3 data, 4 numerical.
"""


class TokinpaintError(Exception):
    exit_code = 3


class UsageError(TokinpaintError):
    exit_code = 2


class DataError(TokinpaintError):
    exit_code = 3


class NumericalFailure(TokinpaintError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# token codec
class InvalidAudio(DataError):
    pass


class AudioTooShort(DataError):
    pass


class CorpusTooSmall(DataError):
    pass


class InvalidCodecParams(UsageError):
    pass


class MaskedTokenInDecode(DataError):
    pass


class MalformedTokenStream(DataError):
    pass


class MalformedCodecFile(DataError):
    pass


# diffusion core
class InvalidTime(UsageError):
    pass


class InvalidSchedule(UsageError):
    pass


class InvalidCleanToken(DataError):
    pass


class InconsistentCorruption(DataError):
    pass


class InvalidScore(NumericalFailure):
    pass


class StepTooLarge(NumericalFailure):
    pass


# score network
class InvalidConfig(UsageError):
    pass


class ContextOverflow(DataError):
    pass


class IncompatibleCheckpoint(DataError):
    pass


# trainer
class EmptyCorpus(DataError):
    pass


class SequenceTooShort(EmptyCorpus):
    pass


# inpainting
class InvalidGap(DataError):
    pass


class GapTooWide(DataError):
    pass


class InvalidModel(DataError):
    pass


# metrics
class LengthMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class InvalidStats(DataError):
    pass


class PairingError(DataError):
    pass
