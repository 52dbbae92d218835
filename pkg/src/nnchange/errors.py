"""Exception and warning classes raised by nnchange."""


class NNChangeError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(NNChangeError, ValueError):
    pass


class ZeroOutputWeight(NNChangeError, ValueError):
    """A hidden unit has output weight exactly zero and must be pruned first."""


class TooShort(NNChangeError, ValueError):
    pass


class SegmentTooShort(TooShort):
    pass


class AllWeightsZero(NNChangeError, ValueError):
    """The trimming parameter removes every candidate split point."""


class NotPSD(NNChangeError, ValueError):
    pass


class NonFinite(NNChangeError, ValueError):
    pass


class UseFiniteSampleCalibration(NNChangeError, ValueError):
    """Raised for weight configurations without a bridge-type limit."""


class FitNotConverged(NNChangeError, RuntimeError):
    pass


class InvalidFamily(NNChangeError, ValueError):
    pass


class ParseError(NNChangeError, ValueError):
    pass


class NoConvergenceWarning(UserWarning):
    pass


class HorizonSaturationWarning(UserWarning):
    pass


class CacheWarning(UserWarning):
    pass
