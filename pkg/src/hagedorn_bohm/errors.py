"""Exception hierarchy shared by all modules."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class InadmissibleError(ContractViolation):
    """(A, B) fails the admissibility conditions or A is singular."""


class NumericalAbort(RuntimeError):
    """A computation was stopped because a monitored invariant broke."""


class AdmissibilityDrift(NumericalAbort):
    pass


class StepUnderflow(NumericalAbort):
    pass


class BoundaryLeak(NumericalAbort):
    pass


class QuadratureError(NumericalAbort):
    pass


class EnvelopeError(NumericalAbort):
    """Rejection sampling is inefficient or the envelope was exceeded."""


class NodeProximity(NumericalAbort):
    """The wave function is too small for the Bohmian velocity to be trusted."""

    def __init__(self, amplitude, message=None):
        self.amplitude = amplitude
        super().__init__(message or f"scaled amplitude {amplitude!r} below node floor")


class ConfigError(ContractViolation):
    pass
