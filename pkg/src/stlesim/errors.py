"""Exception types shared across the package."""


class StleError(Exception):
    """Base class for all errors raised by stlesim."""


class ContractError(StleError, ValueError):
    """An operation was called with arguments violating its contract."""


class SpectrumError(StleError, ValueError):
    """Invalid noise spectrum (bad family parameters, empty support...)."""


class IsotropyError(SpectrumError):
    """The corrector matrix is not a multiple of the identity."""


class ConfigError(StleError, ValueError):
    """Malformed or inconsistent run configuration."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class BlowUpError(StleError, FloatingPointError):
    """Non-finite coefficients appeared during time stepping."""

    def __init__(self, step: int, time: float):
        self.step = step
        self.time = time
        super().__init__(f"non-finite coefficients at step {step} (t={time:g})")


class IntegratorToleranceError(StleError, ArithmeticError):
    """Moment integration produced a negative component beyond tolerance."""
