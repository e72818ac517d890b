"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SSEPError`.
Precondition failures (bad inputs, caps exceeded) derive from
:class:`PreconditionError`, which the CLI maps to exit code 3.
"""


class SSEPError(Exception):
    pass


class PreconditionError(SSEPError, ValueError):
    pass


# kernel
class InvalidKernel(PreconditionError):
    pass


class AsymmetricKernel(InvalidKernel):
    pass


class NotNormalized(InvalidKernel):
    pass


class Decomposable(InvalidKernel):
    pass


class ZeroDisplacement(InvalidKernel):
    pass


class TruncationBudgetExceeded(PreconditionError):
    pass


# graphical
class HorizonTooLarge(PreconditionError):
    pass


class WindowOutOfRange(PreconditionError):
    pass


class DomainMismatch(PreconditionError):
    pass


class DuplicateSites(PreconditionError):
    pass


# dual / exact
class RhoGridTooCoarse(SSEPError):
    pass


class StateSpaceTooLarge(PreconditionError):
    pass


class QuadratureNotConverged(SSEPError):
    pass


# measures
class WindowTooLarge(PreconditionError):
    pass


# experiments
class SignalBelowNoise(SSEPError):
    pass


class TooFewPoints(SSEPError):
    pass
