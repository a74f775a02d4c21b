"""Exception hierarchy shared across the package."""


class TexprError(Exception):
    """Base class for every error this package raises deliberately."""


class TypeMismatch(TexprError):
    pass


class ShapeMismatch(TexprError):
    pass


class CycleDetected(TexprError):
    pass


class UnknownVariable(TexprError):
    pass


class UnderdeterminedOutputs(TexprError):
    pass


class NotDifferentiable(TexprError):
    pass


class DisconnectedInput(TexprError):
    pass


class NotSupported(TexprError):
    pass


class RewriteCycleDetected(TexprError):
    pass


class NoImplementationSelected(TexprError):
    pass


class AbstractOpRemaining(TexprError):
    pass


class LengthMismatch(TexprError):
    pass


class MissingNonSequence(TexprError):
    pass


class MissingTestValue(TexprError):
    pass


class NanDetected(TexprError):
    """Raised by the runtime when a guard check fires; carries the report."""

    def __init__(self, report):
        super().__init__(str(report))
        self.report = report


class BreakpointAbort(TexprError):
    pass


class VersionMismatch(TexprError):
    pass


class CorruptPayload(TexprError):
    pass
