"""Exception types raised across the library."""


class LedError(Exception):
    """Base class for all library errors."""


class DimensionError(LedError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(LedError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(LedError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(LedError, ValueError):
    pass


class ParseError(LedError, ValueError):
    """A data file does not follow its declared format."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class CheckpointError(LedError, ValueError):
    pass


class NonFiniteLossError(LedError, RuntimeError):
    """Training produced a non-finite objective.

    ``last_finite_state`` carries parameter arrays from the last step whose
    loss was finite, so callers can persist them for diagnosis.
    """

    def __init__(self, message, step=None, last_finite_state=None):
        super().__init__(message)
        self.step = step
        self.last_finite_state = last_finite_state
