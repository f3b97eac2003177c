"""Exception hierarchy shared by every module."""


class QuenchLabError(Exception):
    """Base class for all errors raised by quenchlab."""


class UnsupportedDistribution(QuenchLabError):
    pass


class TruncationInsufficient(QuenchLabError):
    """The certified tail bound of a truncated kernel exceeds the tolerance."""


class UnsupportedModelClass(QuenchLabError):
    pass


class Unavailable(QuenchLabError):
    """A quantity has no closed form for this model (e.g. Volterra sigma^2)."""


class SigmaUnavailable(Unavailable):
    pass


class NonIntegrable(QuenchLabError):
    pass


class MomentUnavailable(QuenchLabError):
    pass


class UnsupportedCondition(QuenchLabError):
    pass


class EmptySample(QuenchLabError):
    pass


class KernelInvalid(QuenchLabError):
    """A kernel violates a structural invariant (e.g. nonzero Volterra diagonal)."""


class KernelFormatError(KernelInvalid):
    """A kernel file cannot be parsed into a kernel record at all."""


class ConfigError(QuenchLabError):
    pass
