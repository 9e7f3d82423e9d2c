"""Exception hierarchy shared by all fracdyn modules."""


class FracdynError(Exception):
    """Base class for all errors raised by fracdyn."""


class DomainError(FracdynError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DimensionError(DomainError):
    """Array shapes do not agree (e.g. weights vs. mean-reversion speeds)."""


class StabilityError(DomainError):
    """The explicit OU integration would be unstable (gamma * dt >= 1/2)."""


class UnsupportedRegimeError(FracdynError, ValueError):
    """The requested parameter regime has no usable closed form."""


class SingularSystemError(FracdynError, ArithmeticError):
    """A linear system is too ill-conditioned to be solved reliably."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NonFiniteStateError(FracdynError, ArithmeticError):
    """A simulated state or gradient became NaN or infinite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(NonFiniteStateError):
    """Training diverged (ELBO non-finite or below the divergence floor)."""
