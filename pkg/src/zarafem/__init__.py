"""
Zarafem - Adaptive iteratively linearized finite elements for semilinear elliptic problems.

Zarafem solves ``-div(A grad u) + b(u) = f`` on polygonal domains in 2D with
Lagrange elements of degree 1 to 3 on newest vertex bisection meshes. A damped
Zarantonello iteration linearizes the problem, an algebraic solver (multigrid,
PCG or direct) solves each linear system inexactly, and a residual estimator
drives Doerfler marking. Both inner loops stop adaptively against the estimator.

Main Features:
- Newest vertex bisection with conforming closure and nested Lagrange spaces
- Residual a posteriori estimator with robust weights for singular perturbations
- Local multigrid V-cycle, stateful PCG and sparse direct solvers
- Ledger of every iterate with cost bookkeeping, rate fits and parameter sweeps
- Property checks for refinement, estimator reduction and solver contraction

Basic Usage:
    >>> from zarafem import AdaptiveParams, make_problem, run_adaptive
    >>> problem = make_problem("sine-gordon")
    >>> ledger = run_adaptive(problem, AdaptiveParams(stop_estimator_tol=1e-2))
    >>> print(f"{ledger.termination_reason}: eta = {ledger.final_eta:.3e}")
"""

__version__ = "0.1.0"
__author__ = "zarafem developers"

from .ailfem import (
    AdaptiveDriver,
    AdaptiveParams,
    IterateRecord,
    LevelSummary,
    RunLedger,
    admissible_params,
    dorfler_mark,
    quasi_error,
    reference_solve,
    run_adaptive,
    zarantonello_system,
)
from .config import RunConfig, build_run_config, load_config_file
from .estimator import Indicators, estimate, restrict
from .exceptions import (
    ConfigError,
    ConvergenceError,
    InvalidMeshError,
    InvalidParameterError,
    InvalidProblemError,
    IterationCapError,
    MeshError,
    MeshFormatError,
    MissingExactSolutionError,
    NonFiniteValueError,
    NonNestedSpaceError,
    PointLocationError,
    ProblemError,
    SingularSystemError,
    SolverError,
    SpaceError,
    UnknownProblemError,
    UnsupportedDegreeError,
    ZarafemError,
)
from .forms import (
    Nonlinearity,
    ProblemSpec,
    apply_nonlinear_residual,
    assemble_inner_product,
    energy,
    energy_norm,
    exact_error,
)
from .ledger import fit_rate, read_ledger_csv, summarize, write_ledger_csv
from .linsolve import (
    DirectSolver,
    LevelHierarchy,
    MultigridSolver,
    PCGSolver,
    SolverConfig,
    direct_solve,
    make_solver,
    solver_step,
)
from .mesh import (
    Mesh,
    MeshHierarchy,
    builtin_mesh,
    l_shape,
    read_mesh,
    refine,
    uniform_refine,
    unit_square,
    write_mesh,
)
from .problems import PROBLEMS, make_problem
from .space import (
    FeFunction,
    FeSpace,
    build_space,
    evaluate,
    interpolate,
    prolongate,
    prolongation_matrix,
)

__all__ = [
    # Version
    "__version__",
    "__author__",
    # Meshes
    "Mesh",
    "MeshHierarchy",
    "refine",
    "uniform_refine",
    "unit_square",
    "l_shape",
    "builtin_mesh",
    "read_mesh",
    "write_mesh",
    # Spaces
    "FeSpace",
    "FeFunction",
    "build_space",
    "evaluate",
    "interpolate",
    "prolongate",
    "prolongation_matrix",
    # Problems and forms
    "Nonlinearity",
    "ProblemSpec",
    "PROBLEMS",
    "make_problem",
    "assemble_inner_product",
    "apply_nonlinear_residual",
    "energy",
    "energy_norm",
    "exact_error",
    # Estimator
    "Indicators",
    "estimate",
    "restrict",
    # Solvers
    "SolverConfig",
    "DirectSolver",
    "PCGSolver",
    "MultigridSolver",
    "LevelHierarchy",
    "direct_solve",
    "make_solver",
    "solver_step",
    # Adaptive algorithm
    "AdaptiveParams",
    "AdaptiveDriver",
    "IterateRecord",
    "LevelSummary",
    "RunLedger",
    "run_adaptive",
    "zarantonello_system",
    "dorfler_mark",
    "reference_solve",
    "admissible_params",
    "quasi_error",
    # Ledger and configuration
    "RunConfig",
    "build_run_config",
    "load_config_file",
    "write_ledger_csv",
    "read_ledger_csv",
    "summarize",
    "fit_rate",
    # Exceptions
    "ZarafemError",
    "MeshError",
    "InvalidMeshError",
    "MeshFormatError",
    "SpaceError",
    "UnsupportedDegreeError",
    "NonNestedSpaceError",
    "PointLocationError",
    "ProblemError",
    "UnknownProblemError",
    "InvalidProblemError",
    "MissingExactSolutionError",
    "SolverError",
    "NonFiniteValueError",
    "SingularSystemError",
    "ConvergenceError",
    "IterationCapError",
    "ConfigError",
    "InvalidParameterError",
]
