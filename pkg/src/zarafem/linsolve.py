"""Contractive solvers for the symmetric positive definite inner-product system.

All solvers take full-length vectors and work on the free (interior) DOFs only;
Dirichlet entries of the returned iterate are zero. One call of ``step`` is one
application of the algebraic solver: one V-cycle, one CG iteration, or one exact
solve.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .exceptions import (
    InvalidMeshError,
    InvalidParameterError,
    NonFiniteValueError,
    NonNestedSpaceError,
    SingularSystemError,
    SolverError,
)
from .forms import ProblemSpec, assemble_inner_product
from .mesh import MeshHierarchy
from .space import FeSpace, prolongation_matrix

logger = logging.getLogger(__name__)

SOLVER_KINDS = ("multigrid", "pcg", "direct")
PRECONDITIONERS = ("jacobi", "none")


@dataclass
class SolverConfig:
    """Algebraic solver settings.

    Attributes:
        kind: ``multigrid``, ``pcg`` or ``direct``.
        pre_sweeps: Gauss-Seidel sweeps before the coarse correction.
        post_sweeps: Gauss-Seidel sweeps after the coarse correction.
        preconditioner: ``jacobi`` or ``none`` (PCG only).
        damping: relaxation factor of the smoother.
        log_contraction: measure the energy-norm contraction of every step against
            an exact solve of the same system.
        direct_max_dofs: largest free-DOF count accepted by the direct solver.
    """
    kind: str = "multigrid"
    pre_sweeps: int = 1
    post_sweeps: int = 1
    preconditioner: str = "jacobi"
    damping: float = 1.0
    log_contraction: bool = False
    direct_max_dofs: int = 200_000

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise InvalidParameterError(
                f"solver kind must be one of {SOLVER_KINDS}, got {self.kind!r}"
            )
        if self.preconditioner not in PRECONDITIONERS:
            raise InvalidParameterError(
                f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}"
            )
        if self.pre_sweeps < 1 or self.post_sweeps < 1:
            raise InvalidParameterError("smoothing sweeps must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise InvalidParameterError(f"damping must lie in (0, 1], got {self.damping}")
        if self.direct_max_dofs < 1:
            raise InvalidParameterError("direct_max_dofs must be positive")


def _free_block(matrix: sparse.spmatrix, free: np.ndarray) -> sparse.csr_matrix:
    return sparse.csr_matrix(matrix)[free][:, free].tocsr()


def _factorize(matrix: sparse.spmatrix, **options):
    try:
        return splu(sparse.csc_matrix(matrix), **options)
    except RuntimeError as e:
        raise SingularSystemError(f"factorization failed: {e}") from e


def _check_finite(name: str, vector: np.ndarray) -> None:
    if not np.all(np.isfinite(vector)):
        raise NonFiniteValueError(f"{name} contains NaN or inf")


class AlgebraicSolver:
    """Base class: restriction to free DOFs, input checks and contraction logging."""

    name = "base"

    def __init__(
        self,
        matrix: sparse.spmatrix,
        free: np.ndarray,
        config: Optional[SolverConfig] = None,
    ):
        self.config = config or SolverConfig()
        self.matrix = sparse.csr_matrix(matrix)
        self.free = np.asarray(free, dtype=np.int64)
        self.system = _free_block(self.matrix, self.free)
        self.ratios: List[float] = []
        self._reference = None
        self._reference_rhs = None
        self._reference_solution = None

    @property
    def n_free(self) -> int:
        return len(self.free)

    def reset(self) -> None:
        """Forget internal state carried between steps."""

    def step(self, rhs: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Apply the solver once to the iterate ``w`` for the right-hand side ``rhs``.

        Raises:
            NonFiniteValueError: If ``rhs`` or ``w`` contains NaN or inf.
        """
        rhs = np.asarray(rhs, dtype=float)
        w = np.asarray(w, dtype=float)
        if rhs.shape != (self.matrix.shape[0],) or w.shape != rhs.shape:
            raise ValueError("rhs and iterate must be full-length vectors")
        _check_finite("right-hand side", rhs)
        _check_finite("iterate", w)

        b = rhs[self.free]
        x = w[self.free]
        x_new = self._step(b, x) if self.n_free else x
        if self.config.log_contraction and self.n_free:
            self._record_contraction(b, x, x_new)

        out = np.zeros_like(w)
        out[self.free] = x_new
        return out

    def _step(self, b: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _record_contraction(self, b: np.ndarray, x: np.ndarray, x_new: np.ndarray) -> None:
        if self._reference is None:
            self._reference = _factorize(self.system)
        if self._reference_rhs is None or not np.array_equal(b, self._reference_rhs):
            self._reference_rhs = b.copy()
            self._reference_solution = self._reference.solve(b)
        exact = self._reference_solution
        before = _energy(self.system, x - exact)
        after = _energy(self.system, x_new - exact)
        ratio = after / before if before > 0.0 else 0.0
        self.ratios.append(ratio)
        logger.debug("%s step contraction %.4f", self.name, ratio)
        if ratio >= 1.0:
            logger.warning("%s step did not contract: ratio %.4f", self.name, ratio)


def _energy(matrix: sparse.spmatrix, v: np.ndarray) -> float:
    return float(np.sqrt(max(float(v @ (matrix @ v)), 0.0)))


class DirectSolver(AlgebraicSolver):
    """Sparse LU solve of the free block; every step returns the exact solution."""

    name = "direct"

    def __init__(self, matrix, free, config: Optional[SolverConfig] = None):
        super().__init__(matrix, free, config)
        if self.n_free > self.config.direct_max_dofs:
            raise SolverError(
                f"{self.n_free} free DOFs exceed the direct solver cap "
                f"of {self.config.direct_max_dofs}"
            )
        self._factor = _factorize(self.system) if self.n_free else None

    def _step(self, b, x):
        return self._factor.solve(b)


class PCGSolver(AlgebraicSolver):
    """Preconditioned conjugate gradients, one iteration per step.

    The Krylov state is kept between steps as long as the right-hand side is unchanged
    and the iterate passed in is the one returned last; otherwise CG restarts from the
    given iterate. The energy-norm error therefore decreases monotonically over
    consecutive steps.
    """

    name = "pcg"

    def __init__(self, matrix, free, config: Optional[SolverConfig] = None):
        super().__init__(matrix, free, config)
        if self.config.preconditioner == "jacobi":
            diagonal = self.system.diagonal()
            if np.any(diagonal <= 0.0):
                raise SingularSystemError("Jacobi preconditioner needs a positive diagonal")
            self._inverse_diagonal = 1.0 / diagonal
        else:
            self._inverse_diagonal = None
        self.reset()

    def reset(self) -> None:
        self._rhs = None
        self._x = None
        self._r = None
        self._p = None
        self._rz = None

    def _precondition(self, r: np.ndarray) -> np.ndarray:
        if self._inverse_diagonal is None:
            return r.copy()
        return self._inverse_diagonal * r

    def _step(self, b, x):
        resume = (
            self._rhs is not None
            and np.array_equal(b, self._rhs)
            and np.array_equal(x, self._x)
        )
        if resume:
            r, p, rz = self._r, self._p, self._rz
        else:
            r = b - self.system @ x
            z = self._precondition(r)
            p = z
            rz = float(r @ z)

        if rz <= 0.0:
            return x.copy()
        ap = self.system @ p
        curvature = float(p @ ap)
        if curvature <= 0.0:
            return x.copy()
        alpha = rz / curvature
        x_new = x + alpha * p
        r = r - alpha * ap
        z = self._precondition(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p

        self._rhs = b.copy()
        self._x = x_new.copy()
        self._r, self._p, self._rz = r, p, rz_new
        return x_new


@dataclass(eq=False)
class MultigridLevel:
    """One level of the multigrid hierarchy, restricted to free DOFs.

    Attributes:
        space: finite element space of the level.
        matrix: full Gram matrix.
        system: free block of ``matrix``.
        prolongation: free-to-free transfer from the previous level (None on level 0).
        smoothing_set: free-DOF positions smoothed on this level (new vertices and
            their edge neighbours).
    """
    space: FeSpace
    matrix: sparse.csr_matrix
    system: sparse.csr_matrix
    prolongation: Optional[sparse.csr_matrix] = None
    smoothing_set: Optional[np.ndarray] = None
    _factors: Optional[tuple] = field(default=None, repr=False)

    def smoother(self):
        """Factorizations of the lower and upper triangle of the smoothing block."""
        if self._factors is None:
            block = self.system[self.smoothing_set][:, self.smoothing_set]
            options = dict(permc_spec="NATURAL", diag_pivot_thresh=0.0)
            self._factors = (
                _factorize(sparse.tril(block), **options),
                _factorize(sparse.triu(block), **options),
            )
        return self._factors


class LevelHierarchy:
    """Nested P1 spaces with Gram matrices, transfers and local smoothing sets.

    Levels are appended one at a time as the adaptive loop refines the mesh; each new
    space must live on a mesh refined from the previous level's mesh. The vertices
    created in between, tracked by a :class:`MeshHierarchy`, seed the smoothing sets.
    """

    def __init__(self, prob: ProblemSpec):
        self.prob = prob
        self.levels: List[MultigridLevel] = []
        self.meshes = MeshHierarchy()
        self._coarse = None

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> MultigridLevel:
        return self.levels[-1]

    def add_level(self, space: FeSpace, matrix: Optional[sparse.spmatrix] = None) -> MultigridLevel:
        """Append ``space`` as the new finest level.

        Raises:
            NonNestedSpaceError: If the transfer from the previous level does not
                reproduce the node coordinates exactly.
        """
        if matrix is None:
            matrix = assemble_inner_product(space, self.prob)
        matrix = sparse.csr_matrix(matrix)
        free = space.free_dofs
        level = MultigridLevel(space=space, matrix=matrix, system=_free_block(matrix, free))

        if not self.levels:
            self._coarse = _factorize(level.system) if len(free) else None
            self.meshes.append(space.mesh)
        else:
            previous = self.levels[-1]
            transfer = prolongation_matrix(previous.space, space)
            if not np.allclose(transfer @ previous.space.dof_coords, space.dof_coords, atol=1e-10):
                raise NonNestedSpaceError("prolongation does not reproduce affine functions")
            level.prolongation = transfer[free][:, previous.space.free_dofs].tocsr()
            try:
                self.meshes.append(space.mesh)
            except InvalidMeshError as e:
                raise NonNestedSpaceError(str(e)) from e
            level.smoothing_set = self._smoothing_set(space, self.meshes.new_vertex_sets[-1])

        self.levels.append(level)
        logger.debug(
            "multigrid level %d: %d free dofs, %d smoothed",
            len(self.levels) - 1,
            len(free),
            0 if level.smoothing_set is None else len(level.smoothing_set),
        )
        return level

    @staticmethod
    def _smoothing_set(fine: FeSpace, new_vertices: np.ndarray) -> np.ndarray:
        mesh = fine.mesh
        new = np.zeros(mesh.n_vertices, dtype=bool)
        new[new_vertices] = True
        edges = mesh.edges
        touched = new[edges[:, 0]] | new[edges[:, 1]]
        selected = np.zeros(mesh.n_vertices, dtype=bool)
        selected[edges[touched].ravel()] = True
        selected |= new

        position = np.full(fine.n_dofs, -1, dtype=np.int64)
        position[fine.free_dofs] = np.arange(fine.n_free)
        indices = position[np.flatnonzero(selected)]
        return np.sort(indices[indices >= 0])

    def coarse_solve(self, b: np.ndarray) -> np.ndarray:
        if self._coarse is None:
            return np.zeros_like(b)
        return self._coarse.solve(b)

    def _smooth(self, level: MultigridLevel, b, x, backward: bool, damping: float):
        subset = level.smoothing_set
        if subset is None or not subset.size:
            return x
        lower, upper = level.smoother()
        residual = (b - level.system @ x)[subset]
        correction = (upper if backward else lower).solve(residual)
        x = x.copy()
        x[subset] += damping * correction
        return x

    def v_cycle(self, index: int, b: np.ndarray, x: np.ndarray, config: SolverConfig) -> np.ndarray:
        """One V-cycle on level ``index`` in residual-correction form."""
        if index == 0:
            return self.coarse_solve(b)
        level = self.levels[index]
        for _ in range(config.pre_sweeps):
            x = self._smooth(level, b, x, backward=False, damping=config.damping)
        # a coarse level without free DOFs contributes no correction
        if level.prolongation.shape[1]:
            residual = b - level.system @ x
            coarse_residual = level.prolongation.T @ residual
            correction = self.v_cycle(
                index - 1, coarse_residual, np.zeros(len(coarse_residual)), config
            )
            x = x + level.prolongation @ correction
        for _ in range(config.post_sweeps):
            x = self._smooth(level, b, x, backward=True, damping=config.damping)
        return x


class MultigridSolver(AlgebraicSolver):
    """Geometric multigrid V-cycle with local Gauss-Seidel smoothing.

    The forward sweep runs before and the backward sweep after the coarse correction,
    which makes the error propagation symmetric in the energy inner product.
    """

    name = "multigrid"

    def __init__(self, hierarchy: LevelHierarchy, config: Optional[SolverConfig] = None):
        if not len(hierarchy):
            raise SolverError("multigrid needs a hierarchy with at least one level")
        finest = hierarchy.finest
        super().__init__(finest.matrix, finest.space.free_dofs, config)
        self.hierarchy = hierarchy
        self.depth = len(hierarchy) - 1

    def _step(self, b, x):
        if self.depth == 0:
            return self.hierarchy.coarse_solve(b)
        return self.hierarchy.v_cycle(self.depth, b, x, self.config)


def solver_step(solver: AlgebraicSolver, rhs: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply ``solver`` once; see ``AlgebraicSolver.step``."""
    return solver.step(rhs, w)


def direct_solve(
    matrix: sparse.spmatrix,
    rhs: np.ndarray,
    free: Optional[np.ndarray] = None,
    max_dofs: int = 200_000,
) -> np.ndarray:
    """Solve ``matrix x = rhs`` on the free DOFs (all DOFs when ``free`` is None).

    Raises:
        SolverError: If the system exceeds ``max_dofs``.
        SingularSystemError: If the factorization fails.
    """
    rhs = np.asarray(rhs, dtype=float)
    _check_finite("right-hand side", rhs)
    if free is None:
        free = np.arange(matrix.shape[0])
    config = SolverConfig(kind="direct", direct_max_dofs=max_dofs)
    return DirectSolver(matrix, free, config).step(rhs, np.zeros_like(rhs))


def measure_contraction(solver: AlgebraicSolver, rhs: np.ndarray, n_steps: int) -> np.ndarray:
    """Energy-norm error ratios of ``n_steps`` solver steps started from zero.

    The exact algebraic solution comes from a direct factorization of the same
    system. A step from an exact iterate counts as ratio 0.
    """
    rhs = np.asarray(rhs, dtype=float)
    exact = direct_solve(solver.matrix, rhs, solver.free, max_dofs=max(solver.n_free, 1))
    system = solver.matrix
    w = np.zeros_like(rhs)
    error = _energy(system, w - exact)
    ratios = []
    for _ in range(n_steps):
        w = solver.step(rhs, w)
        new_error = _energy(system, w - exact)
        ratios.append(new_error / error if error > 0.0 else 0.0)
        error = new_error
    ratios = np.array(ratios)
    if ratios.size and ratios.max() >= 1.0:
        logger.warning("%s solver failed to contract: max ratio %.4f", solver.name, ratios.max())
    return ratios


def make_solver(
    config: SolverConfig,
    space: FeSpace,
    matrix: sparse.spmatrix,
    hierarchy: Optional[LevelHierarchy] = None,
) -> AlgebraicSolver:
    """Create the solver described by ``config`` for the system ``matrix`` on ``space``.

    Multigrid is only available for ``p = 1``; higher degrees fall back to
    Jacobi-preconditioned CG.
    """
    if config.kind == "direct":
        return DirectSolver(matrix, space.free_dofs, config)
    if config.kind == "multigrid" and space.degree == 1:
        if hierarchy is None:
            hierarchy = LevelHierarchy(prob=None)
            hierarchy.add_level(space, matrix)
        if hierarchy.finest.space is not space:
            raise SolverError("the finest multigrid level must be the current space")
        return MultigridSolver(hierarchy, config)
    if config.kind == "multigrid":
        logger.warning(
            "multigrid is only available for p=1; using Jacobi-PCG for p=%d", space.degree
        )
    return PCGSolver(matrix, space.free_dofs, config)
