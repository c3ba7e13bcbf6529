"""Exception hierarchy shared by every stage of the pipeline."""


class MfaanError(Exception):
    """Base class for all errors raised by this package."""


# audio
class MalformedContainer(MfaanError):
    pass


class UnsupportedEncoding(MfaanError):
    pass


class EmptyAudio(MfaanError):
    pass


class ClipTooShort(MfaanError):
    pass


class RateMismatch(MfaanError):
    pass


# features / engine
class DegenerateFilter(MfaanError):
    pass


class ShapeMismatch(MfaanError):
    pass


class InputTooShort(MfaanError):
    pass


class FingerprintMismatch(MfaanError):
    def __init__(self, expected, found, what="feature config"):
        self.expected = expected
        self.found = found
        super().__init__(f"{what} fingerprint mismatch: expected {expected}, found {found}")


class KindMismatch(MfaanError):
    pass


# checkpoints and caches
class CheckpointError(MfaanError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


# data
class BadHeader(MfaanError):
    pass


class BadLabel(MfaanError):
    pass


class DuplicateId(MfaanError):
    pass


class EmptyDataset(MfaanError):
    pass


class DegenerateSplit(MfaanError):
    pass


class CacheMiss(MfaanError):
    pass


# metrics
class EmptySet(MfaanError):
    pass


class SingleClass(MfaanError):
    pass


class TrainingDiverged(MfaanError):
    pass
