"""Exception hierarchy.

Each class maps to a CLI exit category (see ``fedtd.cli``).
"""


class FedTdError(Exception):
    exit_code = 1


class ConfigError(FedTdError, ValueError):
    """Invalid configuration or mismatched dimensions.

    ``field`` holds a dotted path to the offending entry when known.
    """

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(FedTdError, ArithmeticError):
    """A linear solve or fixed-point check failed its tolerance."""

    exit_code = 3

    def __init__(self, message, quantity=None, residual=None):
        self.quantity = quantity
        self.residual = residual
        super().__init__(message)


class GenerationError(NumericalError):
    pass


class HeterogeneityViolation(NumericalError):
    """Support mismatch between agents' induced chains.

    ``violations`` is a list of ``(s, s_next, i, j)`` tuples.
    """

    def __init__(self, message, violations):
        self.violations = list(violations)
        super().__init__(message, quantity="eps_p")


class MixingError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class ProtocolError(FedTdError):
    """Server received the wrong number of agent messages."""

    exit_code = 3


class AggregationError(FedTdError, ValueError):
    exit_code = 3


class DivergenceError(FedTdError):
    exit_code = 4
