"""Exception types shared across the package.

CLI exit codes map onto these: config 2, data 3, divergence 4.
"""


class KaoError(Exception):
    exit_code = 1


class DomainError(KaoError, ValueError):
    """An argument lies outside an operation's domain (shape, range, step)."""


class ConfigError(KaoError, ValueError):
    exit_code = 2


class DataError(KaoError):
    exit_code = 3


class DivergenceError(KaoError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GradientCheckError(KaoError, ArithmeticError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate
