"""Exception types shared across the package."""


class DomainError(ValueError):
    """A constitutive function was evaluated outside its admissible domain."""


class FeasibilityError(RuntimeError):
    """A field state violates admissibility at a quadrature point.

    Carries the index of the first offending cell.
    """

    def __init__(self, message: str, cell: int | None = None):
        super().__init__(message)
        self.cell = cell


class ConfigurationError(ValueError):
    """Inconsistent scenario, mesh tag, or boundary condition setup."""


class SolverError(RuntimeError):
    """Base class for nonlinear/linear solve failures."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class NonConvergence(SolverError):
    """Newton reached the iteration limit without meeting a tolerance."""


class LinearSolveFailure(SolverError):
    """Sparse factorization failed or produced an unusable solution."""


class FeasibilityExhausted(SolverError):
    """The damping safeguard halved the step 30 times without finding an
    admissible trial state."""
