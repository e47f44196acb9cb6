"""Exception hierarchy shared by all cmsolve modules.

Two top-level families matter for the CLI: ValidationError maps to exit
code 2 (bad inputs, contract violations caught up front) and
NumericalAbort maps to exit code 3 (a run that started fine but went
numerically wrong, e.g. NaN loss or diverging optimization).
"""


class CmsolveError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CmsolveError):
    """Inputs violate a precondition or a declared invariant."""


class MalformedHeader(ValidationError):
    """Tensor file header is not a valid .ten header."""


class TruncatedPayload(ValidationError):
    """Tensor file payload is shorter than the header promises."""


class ShapeMismatch(ValidationError):
    """Two tensors (or a tensor and an expectation) disagree in shape."""


class CapabilityError(ValidationError):
    """An operator lacks the capability a caller requires (pinv, gradient)."""


class NumericalAbort(CmsolveError):
    """A numerical procedure failed mid-run (NaN loss, divergence).

    Carries optional diagnostics so the failure site can be reconstructed.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
