"""Exception hierarchy shared across the package."""


class QCFaceError(Exception):
    """Base class for all errors raised by this package."""


class ZeroVector(QCFaceError, ValueError):
    pass


class CollinearProxies(QCFaceError, ValueError):
    pass


class InvalidTheta(QCFaceError, ValueError):
    pass


class InvalidBounds(QCFaceError, ValueError):
    pass


class InvalidGuidance(QCFaceError, ValueError):
    pass


class NonPositiveMagnitude(QCFaceError, ValueError):
    pass


class SingularMarginDerivative(QCFaceError, ArithmeticError):
    """Raised when the cot(m1*theta) branch of dF/dcos hits its pole."""


class NonFiniteLoss(QCFaceError, ArithmeticError):
    pass


class NonFiniteGradient(QCFaceError, ArithmeticError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class PrototypeSeparationFailure(QCFaceError, RuntimeError):
    pass


class BadEdges(QCFaceError, ValueError):
    pass


class DegenerateVariance(QCFaceError, ValueError):
    pass


class EmptyScores(QCFaceError, ValueError):
    pass


class EmptyGallery(QCFaceError, ValueError):
    pass


class ConfigError(QCFaceError, ValueError):
    pass
