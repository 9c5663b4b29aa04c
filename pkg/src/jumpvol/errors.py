"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violates a documented precondition (domain, sign, range)."""


class ModelError(RuntimeError):
    """A model primitive produced an inadmissible value (non-finite, wrong sign)."""


class NoInteriorSolution(RuntimeError):
    """Root bracketing failed: the first-order condition has no sign change.

    Carries the residuals at both bracket endpoints so the caller can see
    which side the root escaped through.
    """

    def __init__(self, message, lo, hi, res_lo, res_hi):
        super().__init__(
            f"{message} (bracket [{lo:.6g}, {hi:.6g}], "
            f"residuals {res_lo:.6g} / {res_hi:.6g})"
        )
        self.bracket = (lo, hi)
        self.residuals = (res_lo, res_hi)


class ConvergenceError(RuntimeError):
    """Fixed-point iteration did not reach tolerance; carries the norm history."""

    def __init__(self, message, history):
        super().__init__(f"{message} (last norms: {[f'{v:.3e}' for v in history[-5:]]})")
        self.history = list(history)


class EstimationError(RuntimeError):
    """Monte Carlo estimation could not produce a result (e.g. all paths excluded)."""


class ConfigError(ValueError):
    """Scenario configuration is missing, malformed, or inconsistent."""
