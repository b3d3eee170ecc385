"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A parameter is outside its admissible range."""


class UnsupportedFormError(ValueError):
    """An exact method was requested for a drift it cannot handle."""


class BlowUpError(FloatingPointError):
    """A trajectory left the admissible range (|value| > 1e6 or non-finite)."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t

    def __str__(self):
        base = super().__str__()
        if self.t is None:
            return base
        return f"{base} (at t={self.t:.6g})"
