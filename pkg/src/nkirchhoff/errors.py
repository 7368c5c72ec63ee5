"""Exception types shared across the package."""


class NKirchhoffError(Exception):
    """Base class for all package errors."""


class SaturationError(NKirchhoffError):
    """An exponential evaluation would exceed the floating-point range.

    Raised instead of silently returning inf, because descent iterates can
    transiently visit huge field values.  Carries the offending node index
    when raised during field assembly.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class QuadratureError(NKirchhoffError):
    """A primitive evaluation failed to reach its accuracy target."""


class BracketNotFound(NKirchhoffError):
    """A sign change could not be bracketed within the scan window."""


class NoBranch(NKirchhoffError):
    """No Nehari branch point of the requested type exists along the ray."""


class NonConvergence(NKirchhoffError):
    """A solver exhausted its iteration/restart budget without passing
    its residual test."""


class InnerMaxNotFound(NKirchhoffError):
    """A ray maximization found no finite maximum (the ray is unbounded
    above, signalling an imbalance between the Kirchhoff growth and the
    nonlinearity)."""


class SupportExceedsDomain(NKirchhoffError):
    """A compactly supported profile does not fit inside the domain."""


class ConfigError(NKirchhoffError):
    """An experiment configuration is malformed or violates a standing
    assumption."""
