"""Exception types shared across the package."""


class GeoctrlError(Exception):
    """Base class for all package errors."""


class NonFiniteSample(GeoctrlError):
    pass


class DegenerateMetric(GeoctrlError):
    pass


class ZeroDivisor(GeoctrlError):
    pass


class StepFailure(GeoctrlError):
    def __init__(self, msg, s=None, state=None):
        super().__init__(msg)
        self.s = s
        self.state = state


class BlowUp(GeoctrlError):
    def __init__(self, msg, s=None, state=None):
        super().__init__(msg)
        self.s = s
        self.state = state


class EmptyTrappedSet(GeoctrlError):
    pass


class SpanTooShort(GeoctrlError):
    pass


class NoControl(GeoctrlError):
    pass


class ChartFailure(GeoctrlError):
    pass


class NoRadius(GeoctrlError):
    pass


class InequalityViolated(GeoctrlError):
    def __init__(self, msg, witness=None, residual=None):
        super().__init__(msg)
        self.witness = witness
        self.residual = residual


class NoExit(GeoctrlError):
    pass


class SingularCorrection(GeoctrlError):
    pass


class CflViolation(GeoctrlError):
    pass


class NonFinite(GeoctrlError):
    pass


class ConfigError(GeoctrlError):
    def __init__(self, msg, path=None):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path
