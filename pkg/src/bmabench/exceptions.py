"""Exception types shared across the package.

Validation and dimension errors subclass ValueError so callers that only
know the stdlib hierarchy still behave sensibly.
"""


class DimensionError(ValueError):
    """Array or layer shapes are incompatible."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A file does not match its declared binary or text layout."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (e.g. all-zero projection rows)."""


class ConvergenceError(RuntimeError):
    """A sampler failed to produce usable draws.

    Carries a ``diagnostics`` dict (step size, divergence counts, ...) so
    callers can report what went wrong.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
