"""Exception types shared across the package."""


class BKMRError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BKMRError, ValueError):
    """Input violates a documented precondition."""


class DegenerateColumnError(InvalidInputError):
    """A column has zero variance (or is otherwise unusable for scaling)."""


class UndefinedCVError(InvalidInputError):
    """Coefficient of variation requested for a zero-mean response."""


class NumericalError(BKMRError, ArithmeticError):
    """A factorization or quadratic form could not be computed."""


class InitializationError(BKMRError):
    """The sampler could not evaluate a finite likelihood at its starting point."""


class ManifestMismatchError(BKMRError):
    """Run artifacts are missing, partial, or do not match the manifest."""
