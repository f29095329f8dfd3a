"""Exception hierarchy shared by all modules."""


class EEGOCError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(EEGOCError, ValueError):
    """A scalar parameter is outside its admissible range."""


class InputError(EEGOCError, ValueError):
    """Input data is missing, inconsistent or has the wrong shape."""


class ParseError(InputError):
    """A file could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    line : int, optional
        1-based line number in the offending file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFeatureError(EEGOCError, NotImplementedError):
    """The input uses a feature outside the supported subset."""


class MeshValidationError(InputError):
    """A mesh violates one of the structural invariants."""


class EmptyBoundaryError(InputError):
    """A required boundary part has no faces."""


class ResourceError(EEGOCError):
    """A size budget (elements, oracle columns) would be exceeded."""


class AssemblyError(EEGOCError):
    """A finite element could not be integrated (degenerate geometry)."""


class LocationError(EEGOCError):
    """An electrode lies outside the mesh beyond the snap tolerance."""


class CompatibilityError(EEGOCError):
    """A pure-Neumann right-hand side violates the solvability condition."""


class SingularMatrixError(EEGOCError):
    """A direct factorization met a (numerically) zero pivot."""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class ConvergenceError(EEGOCError):
    """An iterative solver stopped before reaching the requested tolerance.

    The best iterate and its relative residual are kept on the exception.
    """

    def __init__(self, message, best=None, residual=None):
        self.best = best
        self.residual = residual
        super().__init__(message)


class UsageError(EEGOCError, ValueError):
    """A function was called with arguments that make the result undefined."""
