"""Exception hierarchy shared across the pipeline."""


class SliceLoopError(Exception):
    """Base class for every error raised by this package."""


# numerics
class NotSquare(SliceLoopError, ValueError):
    pass


class NotSymmetric(SliceLoopError, ValueError):
    pass


class NoConvergence(SliceLoopError, RuntimeError):
    pass


class IndefiniteInput(SliceLoopError, ValueError):
    pass


class TooFewSamples(SliceLoopError, ValueError):
    pass


class NegativeSigma(SliceLoopError, ValueError):
    pass


# datagen
class InvalidParams(SliceLoopError, ValueError):
    pass


class DistanceBelowReference(SliceLoopError, ValueError):
    pass


# ercd
class UnknownFeature(SliceLoopError, KeyError):
    pass


class EmptyDataset(SliceLoopError, ValueError):
    pass


class SingleGroupDataset(SliceLoopError, ValueError):
    pass


class EmptyStratum(SliceLoopError, ValueError):
    """A (X, Z) cell needed by the adjustment formula has no samples."""

    def __init__(self, x_value, z_value):
        super().__init__(f"no samples with X={x_value} and Z={z_value}")
        self.x_value = x_value
        self.z_value = z_value


class UnresolvableMetric(SliceLoopError, KeyError):
    pass


# fedcal
class SchemaMismatch(SliceLoopError, ValueError):
    pass


class NonFiniteLoss(SliceLoopError, FloatingPointError):
    pass


class DimensionMismatch(SliceLoopError, ValueError):
    pass


class WeightSumMismatch(SliceLoopError, ValueError):
    pass


# taskmodel
class ShapeMismatch(SliceLoopError, ValueError):
    pass


class DegenerateLabels(SliceLoopError, ValueError):
    pass


# auditval
class CovarianceFailure(SliceLoopError, ArithmeticError):
    pass


class EmptyCell(SliceLoopError, ValueError):
    def __init__(self, y, a):
        super().__init__(f"no samples with Y={y}, A={a}")
        self.y = y
        self.a = a


class BrokenLinkage(SliceLoopError, KeyError):
    pass


# governance
class MalformedPolicy(SliceLoopError, ValueError):
    pass


class IllegalTransition(SliceLoopError, ValueError):
    def __init__(self, state, action):
        super().__init__(f"action {action!r} is not allowed in state {state}")
        self.state = state
        self.action = action


class ChainCorrupt(SliceLoopError, RuntimeError):
    pass


class AuthFailure(SliceLoopError):
    pass


class WrongKeyLength(SliceLoopError, ValueError):
    pass


class Denied(SliceLoopError, PermissionError):
    def __init__(self, verdicts):
        failed = [pid for pid, ok in verdicts.items() if not ok]
        super().__init__(f"access denied by policies: {', '.join(failed)}")
        self.verdicts = verdicts


class NotCertified(SliceLoopError, PermissionError):
    pass


# cli
class DigestMismatch(SliceLoopError, ValueError):
    pass


class ConfigError(SliceLoopError, ValueError):
    pass


class StageFailed(SliceLoopError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
