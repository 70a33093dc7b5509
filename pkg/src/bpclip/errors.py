"""Exception hierarchy for the measurement chain.

Every error carries the CLI exit code it maps to, so the command layer can
translate exceptions without a lookup table.
"""

EXIT_OK = 0
EXIT_ABORTED = 2
EXIT_QUALITY = 3
EXIT_IO = 4
EXIT_DATA = 5


class BPClipError(Exception):
    exit_code = EXIT_DATA


# device model
class DeviceError(BPClipError, ValueError):
    pass


class NonPositiveDiameter(DeviceError):
    pass


class DistanceOutOfTravel(DeviceError):
    pass


class DistanceExceedsRest(DeviceError):
    pass


class NonPhysicalDistance(DeviceError):
    pass


class NegativeDistance(DeviceError):
    pass


class DegenerateCalibration(DeviceError):
    pass


class InvalidProfile(DeviceError):
    pass


class UnknownPhoneModel(DeviceError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# frame analysis
class FrameError(BPClipError):
    exit_code = EXIT_QUALITY
    reason = "frame_error"


class NoProjection(FrameError):
    reason = "no_projection"


class Saturated(FrameError):
    reason = "saturated"


class DiscClipped(FrameError):
    reason = "disc_clipped"


class EmptyOutput(BPClipError):
    exit_code = EXIT_QUALITY


# ppg
class SignalError(BPClipError, ValueError):
    exit_code = EXIT_QUALITY


class TooShort(SignalError):
    pass


class SamplingTooSparse(SignalError):
    pass


# oscillometry
class OscillometryError(BPClipError):
    exit_code = EXIT_QUALITY


class InsufficientLevels(OscillometryError):
    pass


class FitDiverged(OscillometryError):
    pass


class FlatOscillogram(OscillometryError):
    pass


class InvalidRatio(OscillometryError, ValueError):
    exit_code = EXIT_DATA


class ModelFeatureMismatch(OscillometryError):
    exit_code = EXIT_DATA


class InsufficientData(OscillometryError):
    exit_code = EXIT_DATA


class SingularDesign(OscillometryError):
    exit_code = EXIT_DATA


# protocol
class ProtocolError(BPClipError):
    pass


class SessionTerminated(ProtocolError):
    pass


class NotComplete(ProtocolError):
    exit_code = EXIT_ABORTED


class InvalidConfig(ProtocolError, ValueError):
    pass


# twin / harness
class InconsistentConfig(BPClipError, ValueError):
    pass


class DiscExceedsFrame(BPClipError, ValueError):
    pass


class ManifestError(BPClipError):
    exit_code = EXIT_IO


class InvalidManifest(BPClipError, ValueError):
    exit_code = EXIT_DATA


class IOFailure(BPClipError, OSError):
    exit_code = EXIT_IO
