"""Exception hierarchy shared by all modules."""


class LiouvilleError(Exception):
    """Base class for every error raised by the package."""


class DomainError(LiouvilleError, ValueError):
    pass


class QuadratureError(LiouvilleError, ArithmeticError):
    pass


class ConvergenceError(LiouvilleError, ArithmeticError):
    pass


class DiagonalError(LiouvilleError, ValueError):
    """Kernel evaluated at coincident points."""


class NotPositiveDefinite(LiouvilleError, ArithmeticError):
    pass


class SizeCap(LiouvilleError, ValueError):
    pass


class WindowError(LiouvilleError, ValueError):
    pass


class InsertionOverlap(WindowError):
    pass


class ModelMismatch(LiouvilleError, TypeError):
    pass


class TooFewAccepted(LiouvilleError, RuntimeError):
    pass


class ConfigError(LiouvilleError, ValueError):
    pass
