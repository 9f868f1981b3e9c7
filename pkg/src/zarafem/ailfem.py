"""Adaptive iteratively linearized finite element driver.

Three nested loops: mesh levels ``l``, Zarantonello linearization steps ``k`` and
algebraic solver steps ``i``. On every level the linearization is

    <<u^{k,*}, v>> = <<u^{k-1}, v>> + delta [F(v) - <A u^{k-1}, v>]

and the solver iterates ``u^{k,i}`` approximate ``u^{k,*}``. The algebraic loop stops
once

    |||u^{k,i} - u^{k,i-1}||| <= lambda_alg [lambda_lin eta(u^{k,i}) + |||u^{k,i} - u^{k,0}|||]

and ``i >= i_min``; the linearization loop stops once

    E(u^{k,0}) - E(u^{k,i}) <= lambda_lin^2 eta(u^{k,i})^2   and   |||u^{k,i}||| <= norm_cap,

where energy differences below ``energy_relax_tol`` in modulus count as converged.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .estimator import Indicators, estimate
from .exceptions import (
    ConvergenceError,
    InvalidParameterError,
    IterationCapError,
    SolverError,
)
from .forms import (
    ProblemSpec,
    apply_nonlinear_residual,
    assemble_inner_product,
    assemble_reaction_jacobian,
    energy,
    energy_norm,
    exact_error,
    load_vector,
)
from .linsolve import AlgebraicSolver, LevelHierarchy, SolverConfig, make_solver
from .mesh import Mesh, builtin_mesh, refine
from .space import FeFunction, FeSpace, build_space, prolongate

logger = logging.getLogger(__name__)

TERMINATION_REASONS = ("tolerance", "max_levels", "max_cost", "max_dofs", "iteration_cap")


@dataclass
class AdaptiveParams:
    """Parameters of the adaptive algorithm.

    Attributes:
        theta: Doerfler marking parameter in ``(0, 1]``.
        lambda_lin: linearization stopping parameter.
        lambda_alg: algebraic stopping parameter.
        delta: Zarantonello damping.
        i_min: minimal number of algebraic steps per linearization step.
        energy_relax_tol: energy differences below this modulus count as converged.
        norm_cap: bound on ``|||u^{k,i}|||`` required to leave the linearization loop.
        stop_estimator_tol: stop once the final estimator of a level is below this.
        max_levels: last mesh level to solve on.
        max_cost: stop after the level on which the cumulative cost reaches this.
        max_dofs: do not solve on meshes with more DOFs than this.
        degree: polynomial degree ``p``.
        max_inner: safety cap of the algebraic loop.
        max_outer: safety cap of the linearization loop.
        uniform: mark every triangle instead of Doerfler marking.
        track_exact_error: record ``|||u* - u|||`` at final iterates when available.
    """
    theta: float = 0.3
    lambda_lin: float = 0.7
    lambda_alg: float = 0.3
    delta: float = 0.3
    i_min: int = 1
    energy_relax_tol: float = 1e-12
    norm_cap: float = math.inf
    stop_estimator_tol: float = 1e-4
    max_levels: int = 100
    max_cost: float = math.inf
    max_dofs: float = math.inf
    degree: int = 1
    max_inner: int = 500
    max_outer: int = 500
    uniform: bool = False
    track_exact_error: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise InvalidParameterError(f"theta must lie in (0, 1], got {self.theta}")
        for name in ("lambda_lin", "lambda_alg", "delta"):
            if not getattr(self, name) > 0.0:
                raise InvalidParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.i_min < 1:
            raise InvalidParameterError(f"i_min must be at least 1, got {self.i_min}")
        if self.energy_relax_tol < 0.0:
            raise InvalidParameterError("energy_relax_tol must be non-negative")
        if self.norm_cap < 0.0:
            raise InvalidParameterError("norm_cap must be non-negative")
        if self.stop_estimator_tol < 0.0:
            raise InvalidParameterError("stop_estimator_tol must be non-negative")
        if self.max_levels < 0:
            raise InvalidParameterError("max_levels must be non-negative")
        if self.max_cost <= 0 or self.max_dofs <= 0:
            raise InvalidParameterError("max_cost and max_dofs must be positive")
        if self.degree not in (1, 2, 3):
            raise InvalidParameterError(f"degree must be 1, 2 or 3, got {self.degree}")
        if self.max_inner < 1 or self.max_outer < 1:
            raise InvalidParameterError("iteration caps must be at least 1")


@dataclass
class IterateRecord:
    """One iterate ``u_l^{k,i}`` with ``k, i >= 1``."""
    level: int
    k: int
    i: int
    is_final_i: bool
    is_final_k: bool
    dofs: int
    n_triangles: int
    eta: float
    energy: float
    energy_norm: float
    norm_update: float
    cost: int
    seconds: float
    exact_error: Optional[float] = None

    @property
    def index(self) -> Tuple[int, int, int]:
        return (self.level, self.k, self.i)


@dataclass
class LevelSummary:
    """Outcome of one mesh level."""
    level: int
    n_triangles: int
    dofs: int
    eta: float
    k_final: int
    algebra_steps: int
    n_marked: int
    cost: int
    exact_error: Optional[float] = None


@dataclass
class RunLedger:
    """Everything recorded by one adaptive run."""
    problem: str
    params: AdaptiveParams
    solver: str
    records: List[IterateRecord] = field(default_factory=list)
    levels: List[LevelSummary] = field(default_factory=list)
    termination_reason: str = ""
    max_iterate_norm: float = 0.0
    contraction_ratios: List[float] = field(default_factory=list)
    mesh_name: str = ""

    def final_records(self) -> List[IterateRecord]:
        """Records of the final iterates ``u_l^{k_l, i_l}``, one per level."""
        return [r for r in self.records if r.is_final_k]

    @property
    def final_eta(self) -> float:
        finals = self.final_records()
        return finals[-1].eta if finals else math.nan

    @property
    def total_cost(self) -> int:
        return self.records[-1].cost if self.records else 0

    def params_dict(self) -> Dict[str, object]:
        return asdict(self.params)


@dataclass
class LevelState:
    """Mutable state of the current mesh level."""
    level: int
    space: FeSpace
    matrix: sparse.csr_matrix
    load: np.ndarray
    solver: AlgebraicSolver
    u: np.ndarray
    k: int = 0


def zarantonello_system(
    u_prev: FeFunction,
    prob: ProblemSpec,
    delta: float,
    matrix: Optional[sparse.spmatrix] = None,
    load: Optional[np.ndarray] = None,
) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Gram matrix and right-hand side ``K u_prev + delta r(u_prev)`` of one linearization step.

    Dirichlet entries of the right-hand side are zero.
    """
    if not delta > 0.0:
        raise InvalidParameterError(f"delta must be positive, got {delta}")
    if matrix is None:
        matrix = assemble_inner_product(u_prev.space, prob)
    if load is None:
        load = load_vector(u_prev.space, prob)
    residual = apply_nonlinear_residual(u_prev, prob, matrix, load)
    rhs = matrix @ u_prev.coefficients + delta * residual
    rhs[u_prev.space.dirichlet_mask] = 0.0
    return matrix, rhs


def dorfler_mark(ind, theta: float) -> np.ndarray:
    """Minimal set ``M`` with ``theta * eta^2 <= eta(M)^2``.

    Indicators are sorted by value descending with ties broken by ascending index, and
    the shortest prefix reaching the threshold is returned (sorted by index). Sums are
    evaluated with ``math.fsum`` so the inequality holds exactly.

    Args:
        ind: ``Indicators`` or an array of squared indicators.
        theta: marking parameter in ``(0, 1]``.
    """
    if not 0.0 < theta <= 1.0:
        raise InvalidParameterError(f"theta must lie in (0, 1], got {theta}")
    values = np.asarray(ind.values if isinstance(ind, Indicators) else ind, dtype=float)
    total = math.fsum(values)
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)

    target = theta * total
    order = np.lexsort((np.arange(len(values)), -values))
    sorted_values = values[order]
    count = int(np.searchsorted(np.cumsum(sorted_values), target, side="left")) + 1
    count = min(count, len(values))
    while count < len(values) and math.fsum(sorted_values[:count]) < target:
        count += 1
    while count > 1 and math.fsum(sorted_values[:count - 1]) >= target:
        count -= 1
    return np.sort(order[:count])


def reference_solve(
    space: FeSpace,
    prob: ProblemSpec,
    tol: float = 1e-13,
    max_steps: int = 200,
    max_dofs: int = 50_000,
) -> FeFunction:
    """Discrete solution ``u*_H`` by damped Newton iteration.

    Steps are halved until the Euclidean residual norm on free DOFs decreases.
    Iteration ends once the residual is at most ``tol * ||F||``; when a full step no
    longer reduces a residual that is already below ``1e-9 * ||F||`` the iterate is
    accepted as converged to roundoff.

    Raises:
        SolverError: If the space has more than ``max_dofs`` free DOFs.
        ConvergenceError: If Newton does not converge within ``max_steps``.
    """
    if space.n_free > max_dofs:
        raise SolverError(f"{space.n_free} free DOFs exceed the reference solver cap {max_dofs}")
    free = space.free_dofs
    matrix = assemble_inner_product(space, prob)
    load = load_vector(space, prob)
    u = FeFunction.zeros(space)
    if not len(free):
        return u

    scale = float(np.linalg.norm(load[free]))
    residual = apply_nonlinear_residual(u, prob, matrix, load)[free]
    norm = float(np.linalg.norm(residual))
    for step in range(max_steps):
        if norm <= tol * scale:
            logger.debug("newton converged after %d steps, residual %.3e", step, norm)
            return u
        jacobian = matrix + assemble_reaction_jacobian(u, prob)
        try:
            direction = splu(sparse.csc_matrix(jacobian[free][:, free])).solve(residual)
        except RuntimeError as e:
            raise ConvergenceError(f"Newton system is singular: {e}") from e

        t = 1.0
        while True:
            coefficients = u.coefficients.copy()
            coefficients[free] += t * direction
            candidate = FeFunction(space, coefficients)
            candidate_residual = apply_nonlinear_residual(candidate, prob, matrix, load)[free]
            candidate_norm = float(np.linalg.norm(candidate_residual))
            if candidate_norm <= (1.0 - 1e-4 * t) * norm or t < 1.0 / 1024:
                break
            t *= 0.5

        if candidate_norm >= norm and norm <= 1e-9 * scale:
            logger.warning(
                "newton stagnated after %d steps at residual %.3e (%.1e relative, tolerance %.1e)",
                step,
                norm,
                norm / scale,
                tol,
            )
            return u
        u, residual, norm = candidate, candidate_residual, candidate_norm

    if norm <= tol * scale:
        return u
    raise ConvergenceError(
        f"Newton did not converge in {max_steps} steps (residual {norm:.3e}, ||F|| {scale:.3e})"
    )


@dataclass(frozen=True)
class AdmissibleParameters:
    theta_mark: float
    theta_star: float
    i_min: int
    ok: bool


def admissible_params(
    theta: float,
    lambda_lin_ratio: float,
    q_alg: float,
    c_stab: float = 1.0,
    c_rel: float = 1.0,
) -> AdmissibleParameters:
    """Parameter conditions for optimal complexity.

    ``theta_mark = (theta^{1/2} + r)^2 / (1 - r)^2`` with ``r = lambda_lin / lambda_lin*``,
    ``theta* = (1 + c_stab^2 c_rel^2)^{-1}`` and ``i_min`` the smallest ``i >= 1`` with
    ``q_alg^i <= 1/3``. ``ok`` holds when ``theta_mark < theta*``.

    Raises:
        InvalidParameterError: If ``r`` is not in ``[0, 1)`` or ``q_alg`` not in ``(0, 1)``.
    """
    if not 0.0 <= lambda_lin_ratio < 1.0:
        raise InvalidParameterError(
            f"lambda_lin ratio must lie in [0, 1), got {lambda_lin_ratio}"
        )
    if not 0.0 < q_alg < 1.0:
        raise InvalidParameterError(f"q_alg must lie in (0, 1), got {q_alg}")
    if not 0.0 < theta <= 1.0:
        raise InvalidParameterError(f"theta must lie in (0, 1], got {theta}")

    theta_mark = (math.sqrt(theta) + lambda_lin_ratio) ** 2 / (1.0 - lambda_lin_ratio) ** 2
    theta_star = 1.0 / (1.0 + c_stab**2 * c_rel**2)
    i_min = 1
    while q_alg**i_min > (1.0 + 1e-12) / 3.0:
        i_min += 1
    return AdmissibleParameters(theta_mark, theta_star, i_min, theta_mark < theta_star)


def quasi_error(
    space: FeSpace,
    prob: ProblemSpec,
    u: np.ndarray,
    linearized: np.ndarray,
    discrete: np.ndarray,
    eta: float,
    matrix: Optional[sparse.spmatrix] = None,
) -> float:
    """``|||u*_l - u||| + |||u^{k,*} - u||| + eta`` from oracle solutions."""
    if matrix is None:
        matrix = assemble_inner_product(space, prob)
    return (
        energy_norm(space, prob, discrete - u, matrix)
        + energy_norm(space, prob, linearized - u, matrix)
        + eta
    )


IterateCallback = Callable[[IterateRecord, LevelState, np.ndarray], None]


class AdaptiveDriver:
    """State machine running SOLVE & ESTIMATE, MARK and REFINE until termination.

    Args:
        problem: Problem data.
        params: Algorithm parameters.
        solver_config: Algebraic solver settings.
        mesh: Initial mesh; defaults to the built-in mesh named by ``problem.domain``.
        on_iterate: Called after every recorded iterate with the record, the level
            state and the iterate coefficients.
    """

    def __init__(
        self,
        problem: ProblemSpec,
        params: Optional[AdaptiveParams] = None,
        solver_config: Optional[SolverConfig] = None,
        mesh: Optional[Mesh] = None,
        on_iterate: Optional[IterateCallback] = None,
    ):
        self.problem = problem
        self.params = params or AdaptiveParams()
        self.solver_config = solver_config or SolverConfig()
        self.mesh = mesh if mesh is not None else builtin_mesh(problem.domain)
        self.on_iterate = on_iterate
        self.ledger = RunLedger(
            problem=problem.name,
            params=self.params,
            solver=self.solver_config.kind,
            mesh_name=problem.domain if mesh is None else "custom",
        )
        self._hierarchy: Optional[LevelHierarchy] = None
        self._cost = 0
        self._start = 0.0

    def _norm(self, state: LevelState, v: np.ndarray) -> float:
        return energy_norm(state.space, self.problem, v, state.matrix)

    def _energy(self, state: LevelState, v: np.ndarray) -> float:
        return energy(FeFunction(state.space, v), self.problem, state.matrix, state.load)

    def _record(
        self, state: LevelState, i: int, w: np.ndarray, eta: float, update: float, final: bool
    ) -> IterateRecord:
        self._cost += state.space.mesh.n_triangles
        norm = self._norm(state, w)
        self.ledger.max_iterate_norm = max(self.ledger.max_iterate_norm, norm)
        record = IterateRecord(
            level=state.level,
            k=state.k,
            i=i,
            is_final_i=final,
            is_final_k=False,
            dofs=state.space.n_free,
            n_triangles=state.space.mesh.n_triangles,
            eta=eta,
            energy=self._energy(state, w),
            energy_norm=norm,
            norm_update=update,
            cost=self._cost,
            seconds=time.perf_counter() - self._start,
        )
        self.ledger.records.append(record)
        logger.debug(
            "l=%d k=%d i=%d eta=%.4e update=%.3e", state.level, state.k, i, eta, update
        )
        if self.on_iterate is not None:
            self.on_iterate(record, state, w)
        return record

    def inner_algebra_loop(
        self, state: LevelState, rhs: np.ndarray
    ) -> Tuple[np.ndarray, Indicators]:
        """Run solver steps on one linearized system until the algebraic criterion holds.

        Raises:
            IterationCapError: If ``max_inner`` steps do not satisfy the criterion.
        """
        params = self.params
        start = state.u
        w = start
        for i in range(1, params.max_inner + 1):
            w_new = state.solver.step(rhs, w)
            indicators = estimate(FeFunction(state.space, w_new), self.problem)
            eta = indicators.total
            update = self._norm(state, w_new - w)
            distance = self._norm(state, w_new - start)
            done = i >= params.i_min and update <= params.lambda_alg * (
                params.lambda_lin * eta + distance
            )
            self._record(state, i, w_new, eta, update, done)
            w = w_new
            if done:
                return w, indicators
        raise IterationCapError(
            f"algebraic loop on level {state.level}, k={state.k} exceeded {params.max_inner} steps"
        )

    def outer_linearization_loop(self, state: LevelState) -> Tuple[np.ndarray, Indicators]:
        """Run linearization steps until the energy criterion and the norm bound hold.

        Raises:
            IterationCapError: If ``max_outer`` steps do not satisfy the criterion.
        """
        params = self.params
        for k in range(1, params.max_outer + 1):
            state.k = k
            previous = FeFunction(state.space, state.u)
            energy_before = self._energy(state, state.u)
            _, rhs = zarantonello_system(
                previous, self.problem, params.delta, state.matrix, state.load
            )
            w, indicators = self.inner_algebra_loop(state, rhs)
            state.u = w

            record = self.ledger.records[-1]
            decrease = energy_before - record.energy
            eta = indicators.total
            if abs(decrease) < params.energy_relax_tol:
                energy_done = True
            else:
                energy_done = max(decrease, 0.0) <= params.lambda_lin**2 * eta**2
            if energy_done and record.energy_norm <= params.norm_cap:
                record.is_final_k = True
                return w, indicators
        raise IterationCapError(
            f"linearization loop on level {state.level} exceeded {params.max_outer} steps"
        )

    def _level_state(self, level: int, space: FeSpace, u: np.ndarray) -> LevelState:
        matrix = assemble_inner_product(space, self.problem)
        load = load_vector(space, self.problem)
        hierarchy = None
        if self.solver_config.kind == "multigrid" and space.degree == 1:
            if self._hierarchy is None:
                self._hierarchy = LevelHierarchy(self.problem)
            self._hierarchy.add_level(space, matrix)
            hierarchy = self._hierarchy
        solver = make_solver(self.solver_config, space, matrix, hierarchy)
        return LevelState(level=level, space=space, matrix=matrix, load=load, solver=solver, u=u)

    def run(self) -> RunLedger:
        """Execute the adaptive loop and return the ledger.

        Budgets end the run with a termination reason. Exceeding an iteration cap
        raises ``IterationCapError`` carrying the partial ledger as ``ledger``.
        """
        params = self.params
        self._start = time.perf_counter()
        mesh = self.mesh
        space = build_space(mesh, params.degree)
        u = np.zeros(space.n_dofs)
        level = 0
        logger.info(
            "run %s: p=%d theta=%g lambda_lin=%g lambda_alg=%g delta=%g",
            self.problem.name, params.degree, params.theta,
            params.lambda_lin, params.lambda_alg, params.delta,
        )
        try:
            while True:
                state = self._level_state(level, space, u)
                u_final, indicators = self.outer_linearization_loop(state)
                eta = indicators.total
                final = self.ledger.records[-1]
                if params.track_exact_error and self.problem.exact_gradient is not None:
                    final.exact_error = exact_error(FeFunction(space, u_final), self.problem)
                self.ledger.contraction_ratios.extend(state.solver.ratios)

                reason = self._termination_reason(level, eta)
                marked = np.zeros(0, dtype=np.int64)
                if reason is None:
                    if params.uniform:
                        marked = np.arange(mesh.n_triangles)
                    else:
                        marked = dorfler_mark(indicators, params.theta)
                self._summarize_level(state, eta, len(marked))
                if reason is not None:
                    break

                fine = refine(mesh, marked)
                fine_space = build_space(fine, params.degree)
                if fine_space.n_free > params.max_dofs:
                    reason = "max_dofs"
                    break
                u = prolongate(FeFunction(space, u_final), fine_space).coefficients
                mesh, space, level = fine, fine_space, level + 1
        except IterationCapError as e:
            self.ledger.termination_reason = "iteration_cap"
            e.ledger = self.ledger
            raise

        self.ledger.termination_reason = reason
        logger.info(
            "run %s finished (%s): %d levels, eta=%.4e, cost=%d",
            self.problem.name, reason, level + 1, self.ledger.final_eta, self._cost,
        )
        return self.ledger

    def _termination_reason(self, level: int, eta: float) -> Optional[str]:
        params = self.params
        if eta < params.stop_estimator_tol:
            return "tolerance"
        if level >= params.max_levels:
            return "max_levels"
        if self._cost >= params.max_cost:
            return "max_cost"
        return None

    def _summarize_level(self, state: LevelState, eta: float, n_marked: int) -> None:
        records = [r for r in self.ledger.records if r.level == state.level]
        summary = LevelSummary(
            level=state.level,
            n_triangles=state.space.mesh.n_triangles,
            dofs=state.space.n_free,
            eta=eta,
            k_final=state.k,
            algebra_steps=len(records),
            n_marked=n_marked,
            cost=self._cost,
            exact_error=records[-1].exact_error,
        )
        self.ledger.levels.append(summary)
        logger.info(
            "level %d: %d triangles, %d dofs, eta=%.4e, k=%d, steps=%d, cost=%d",
            summary.level, summary.n_triangles, summary.dofs, eta,
            summary.k_final, summary.algebra_steps, summary.cost,
        )


def run_adaptive(
    prob: ProblemSpec,
    params: Optional[AdaptiveParams] = None,
    mesh: Optional[Mesh] = None,
    solver_config: Optional[SolverConfig] = None,
    on_iterate: Optional[IterateCallback] = None,
) -> RunLedger:
    """Run the adaptive algorithm from the zero initial guess; see ``AdaptiveDriver``."""
    driver = AdaptiveDriver(prob, params, solver_config, mesh, on_iterate)
    return driver.run()
