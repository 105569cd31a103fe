"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


class StateError(RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class InvertibilityError(ContractError):
    """A matrix that must be inverted is singular or badly conditioned."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
