"""Exception types shared across the package."""


class RmauNetError(Exception):
    """Root of every error this package raises on purpose."""


class DataError(RmauNetError):
    """Bad input data or files; CLI maps these to exit code 2."""


class RuntimeFailure(RmauNetError):
    """Failures during a run (divergence, IO mid-run); CLI exit code 3."""


# validation
class ShapeMismatch(DataError):
    pass


class NonBinaryMask(DataError):
    pass


class NonFiniteData(DataError):
    pass


class NonSquareTile(DataError):
    pass


class ChannelMismatch(DataError):
    pass


class MissingBand(DataError):
    pass


# serialization
class BadMagic(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class TruncatedFile(DataError):
    pass


class IoFailure(RuntimeFailure):
    pass


# manifests / splits
class EmptyManifest(DataError):
    pass


class EmptyTrainSplit(DataError):
    pass


class EmptyTestSplit(DataError):
    pass


# evaluation
class BadThreshold(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MissingHead(DataError):
    pass


# training
class DivergedLoss(RuntimeFailure):
    pass
