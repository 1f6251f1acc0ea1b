"""Exception types raised across the package."""


class PassportError(Exception):
    """Base class for all package errors."""


class ConfigError(PassportError, ValueError):
    pass


class NotPositiveSemidefinite(PassportError, ValueError):
    pass


class ActionNormViolation(PassportError, ValueError):
    pass


class DomainError(PassportError, ValueError):
    pass


class CorrelatedMarket(PassportError, ValueError):
    """Raised when the independent-asset strategy is used on a correlated market."""


class InvalidDistribution(PassportError, ValueError):
    pass


class ShapeMismatch(PassportError, ValueError):
    pass


class NonFiniteGradient(PassportError, FloatingPointError):
    pass


class NonFiniteLoss(PassportError, FloatingPointError):
    pass


class VersionMismatch(PassportError):
    pass


class CorruptFile(PassportError):
    pass


class ResampleCapExceeded(PassportError, RuntimeError):
    pass


class GridTooCoarse(PassportError, RuntimeError):
    pass


class PropertyViolation(PassportError, AssertionError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
