"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit 2, solver
failures exit 3 and non-convergence exits 4.
"""


class TopoestError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TopoestError, ValueError):
    """Input data violates a structural invariant."""


class ParseError(ValidationError):
    """Malformed text input; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SolverError(TopoestError):
    """A numerical solver could not produce a solution."""


class DivergenceError(SolverError):
    pass


class InfeasibleIslandError(SolverError):
    """Nonzero load sits on an island cut off from the substation."""


class QPInfeasibleError(SolverError):
    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class QPUnboundedError(SolverError):
    pass


class NotPSDError(ValidationError):
    pass


class BigMError(SolverError):
    """A big-M bound was tight for a closed switch, so M may be too small."""


class EstimationError(SolverError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
