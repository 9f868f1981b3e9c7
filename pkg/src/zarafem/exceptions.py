"""Custom exceptions for the zarafem adaptive finite element library."""


class ZarafemError(Exception):
    """Base exception for all zarafem errors."""
    pass


class MeshError(ZarafemError):
    """Base exception for triangulation errors."""
    pass


class InvalidMeshError(MeshError):
    """Raised when a triangulation or a set of marked elements is invalid."""
    pass


class MeshFormatError(MeshError):
    """Raised when a mesh file does not follow the text mesh format."""
    pass


class SpaceError(ZarafemError):
    """Base exception for finite element space errors."""
    pass


class UnsupportedDegreeError(SpaceError):
    """Raised when a polynomial degree is not supported."""
    pass


class NonNestedSpaceError(SpaceError):
    """Raised when two spaces are not nested."""
    pass


class PointLocationError(SpaceError):
    """Raised when a point lies outside every triangle of a mesh."""
    pass


class ProblemError(ZarafemError):
    """Base exception for problem specification errors."""
    pass


class UnknownProblemError(ProblemError):
    """Raised when a problem name is not registered."""
    pass


class InvalidProblemError(ProblemError):
    """Raised when problem data violates the model assumptions."""
    pass


class MissingExactSolutionError(ProblemError):
    """Raised when an exact solution is required but not available."""
    pass


class SolverError(ZarafemError):
    """Base exception for solver errors."""
    pass


class NonFiniteValueError(SolverError):
    """Raised when a right-hand side or an iterate contains NaN or inf."""
    pass


class SingularSystemError(SolverError):
    """Raised when a direct factorization fails."""
    pass


class ConvergenceError(SolverError):
    """Raised when an iteration does not converge."""
    pass


class IterationCapError(ConvergenceError):
    """Raised when a loop of the adaptive algorithm exceeds its safety cap."""
    pass


class ConfigError(ZarafemError):
    """Base exception for run configuration errors."""
    pass


class InvalidParameterError(ConfigError, ValueError):
    """Raised when an algorithm parameter is out of range."""
    pass
