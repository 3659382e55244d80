"""Semantic exceptions shared across the package."""


class ScreenforgeError(Exception):
    """Base class for all package errors."""


class InvalidIntervalError(ScreenforgeError, ValueError):
    """An interval or box argument is degenerate or reversed."""


class EvaluationFailure(ScreenforgeError, ArithmeticError):
    """An integrand returned a non-finite value.

    Carries the offending point in ``.point``.
    """

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class BracketError(ScreenforgeError, ValueError):
    """Root bracketing failed: both endpoints have the same sign."""


class DomainStencilError(ScreenforgeError, ValueError):
    """A finite-difference stencil would leave the declared domain."""


class DensityZeroError(ScreenforgeError, ZeroDivisionError):
    """A density is zero at a point where a ratio is required."""


class QuantileError(ScreenforgeError, ArithmeticError):
    """Numeric quantile inversion did not converge."""


class InvarianceRequiredError(ScreenforgeError, ValueError):
    """Operation is only valid when the dependency structure is
    invariant in the pre-contract type."""


class RegularityError(ScreenforgeError, ValueError):
    """A regularity condition (single crossing, monotone virtual value)
    failed on the evaluation grid."""


class LpInfeasibleError(ScreenforgeError, RuntimeError):
    """The linear program has no feasible point."""


class LpUnboundedError(ScreenforgeError, RuntimeError):
    """The linear program is unbounded."""


class ConvergenceError(ScreenforgeError, RuntimeError):
    """An iterative procedure hit its round cap before converging."""


class DegenerateCellError(ScreenforgeError, ValueError):
    """Discretization produced a materially negative cell mass."""


class ShapeMismatchError(ScreenforgeError, ValueError):
    """Mechanism tables do not match the instance's shapes."""


class ConfigError(ScreenforgeError, ValueError):
    """A run configuration is malformed or references unknown names."""
