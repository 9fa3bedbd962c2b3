"""Error types raised by the toolkit."""


class DomainError(ValueError):
    """An input violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation hit a singular or ill-conditioned system."""


class SimulationFault(RuntimeError):
    """The simulated spot volatility left the positive semidefinite cone."""

    def __init__(self, message, day=None):
        super().__init__(message)
        self.day = day
