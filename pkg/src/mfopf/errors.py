"""Exception hierarchy shared across the package."""


class MfopfError(Exception):
    """Base class for all library errors."""


class InvalidConfiguration(MfopfError, ValueError):
    """A configuration value or signal definition violates its contract."""


class InvalidArgument(MfopfError, ValueError):
    """A function argument is out of its admissible range or has the wrong shape."""


class InfeasibleSet(MfopfError, ValueError):
    """A feasible set is empty."""


class NumericError(MfopfError, ArithmeticError):
    """An iterative routine failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class PowerFlowDivergence(NumericError):
    """Newton power flow did not converge; the operating point is likely infeasible."""

    def __init__(self, message, iterations=None, step=None):
        super().__init__(message, iterations)
        self.step = step


class UnsupportedOperation(MfopfError, TypeError):
    """The problem lacks model data needed by the requested operation."""


class UndefinedMetric(MfopfError, ValueError):
    """A metric is undefined for the given data (e.g. a zero reference sample)."""
