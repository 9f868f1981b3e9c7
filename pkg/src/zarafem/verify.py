"""Property checks behind ``zarafem verify``.

Every check is deterministic for a given seed and sized to run in seconds.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .ailfem import dorfler_mark, reference_solve, zarantonello_system
from .estimator import estimate
from .forms import ProblemSpec, apply_nonlinear_residual, assemble_inner_product, energy
from .linsolve import LevelHierarchy, MultigridSolver, PCGSolver, direct_solve, measure_contraction
from .mesh import Mesh, l_shape, refine, uniform_refine, unit_square
from .problems import linear_poisson, make_problem, sine_gordon
from .space import FeFunction, build_space, prolongate

logger = logging.getLogger(__name__)

FAULTS = ("flip-jump",)

REDUCTION_FACTOR = 2.0 ** -0.25


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _pure_diffusion() -> ProblemSpec:
    return ProblemSpec(name="pure-diffusion", source=lambda x, y: np.zeros_like(x))


def _random_marks(rng: np.random.Generator, mesh: Mesh, fraction: float) -> np.ndarray:
    count = max(1, int(fraction * mesh.n_triangles))
    return rng.choice(mesh.n_triangles, size=count, replace=False)


def new_triangles(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Fine triangles that are not also coarse triangles."""
    return np.flatnonzero(fine.generation > coarse.generation[fine.parent])


def check_mesh_refinement(rng: np.random.Generator, levels: int = 20) -> CheckResult:
    """Conformity, removal of marked elements, exact child areas, angles and closure overhead."""
    mesh = l_shape()
    initial_triangles = mesh.n_triangles
    angle_floor = 0.5 * mesh.min_angle()
    total_marked = 0
    for level in range(levels):
        marked = _random_marks(rng, mesh, rng.uniform(0.02, 0.2))
        fine = refine(mesh, marked)
        total_marked += len(marked)

        bisections = fine.generation - mesh.generation[fine.parent]
        kept = fine.parent[bisections == 0]
        expected = mesh.areas[fine.parent] / 2.0**bisections
        failure = None
        if not fine.is_conforming():
            failure = "non-conforming mesh"
        elif np.intersect1d(kept, marked).size:
            failure = "marked triangle kept"
        elif np.max(np.abs(fine.areas - expected) / expected) > 1e-12:
            failure = "child area mismatch"
        elif fine.min_angle() < angle_floor:
            failure = "angle degeneration"
        if failure:
            return CheckResult("mesh-refinement", False, f"{failure} on level {level + 1}")
        mesh = fine

    closure = (mesh.n_triangles - initial_triangles) / total_marked
    return CheckResult(
        "mesh-refinement",
        True,
        f"{levels} levels, {mesh.n_triangles} triangles, closure constant {closure:.3f}",
    )


def check_estimator_reduction(
    rng: np.random.Generator,
    refinements: int = 10,
    functions: int = 5,
    flip_jump_sign: bool = False,
) -> CheckResult:
    """Indicators of a coarse function on new elements shrink by ``2^{-1/4}``."""
    prob = _pure_diffusion()
    mesh = uniform_refine(unit_square(), 2)
    worst = 0.0
    for _ in range(refinements):
        fine = refine(mesh, _random_marks(rng, mesh, 0.3))
        coarse_space = build_space(mesh, 1)
        fine_space = build_space(fine, 1)
        created = new_triangles(mesh, fine)
        refined = np.unique(fine.parent[created])
        for _ in range(functions):
            coefficients = rng.standard_normal(coarse_space.n_dofs)
            coefficients[coarse_space.dirichlet_mask] = 0.0
            v = FeFunction(coarse_space, coefficients)
            coarse_eta = estimate(v, prob, flip_jump_sign).restrict(refined)
            fine_eta = estimate(prolongate(v, fine_space), prob, flip_jump_sign).restrict(created)
            bound = REDUCTION_FACTOR * coarse_eta + 1e-10
            worst = max(worst, fine_eta / coarse_eta if coarse_eta > 0 else 0.0)
            if fine_eta > bound:
                return CheckResult(
                    "estimator-reduction",
                    False,
                    f"eta on new elements {fine_eta:.6e} exceeds {bound:.6e}",
                )
        mesh = fine
    return CheckResult(
        "estimator-reduction",
        True,
        f"{refinements * functions} functions, worst ratio {worst:.4f} <= {REDUCTION_FACTOR:.4f}",
    )


def _adaptive_meshes(rng: np.random.Generator, levels: int) -> List[Mesh]:
    meshes = [uniform_refine(l_shape(), 1)]
    for _ in range(levels - 1):
        meshes.append(refine(meshes[-1], _random_marks(rng, meshes[-1], 0.3)))
    return meshes


def check_algebraic_contraction(
    rng: np.random.Generator, levels: int = 6, steps: int = 8
) -> CheckResult:
    """Multigrid and PCG contract the energy-norm error; multigrid uniformly over levels."""
    prob = sine_gordon()
    hierarchy = LevelHierarchy(prob)
    multigrid_max = []
    pcg_max = []
    for depth, mesh in enumerate(_adaptive_meshes(rng, levels)):
        space = build_space(mesh, 1)
        hierarchy.add_level(space)
        if depth < 2:
            continue
        rhs = rng.standard_normal(space.n_dofs)
        rhs[space.dirichlet_mask] = 0.0
        multigrid = MultigridSolver(hierarchy)
        multigrid_max.append(float(measure_contraction(multigrid, rhs, steps).max()))
        pcg = PCGSolver(hierarchy.finest.matrix, space.free_dofs)
        pcg_max.append(float(measure_contraction(pcg, rhs, steps).max()))

    spread = max(multigrid_max) - min(multigrid_max)
    passed = max(multigrid_max) < 1.0 and max(pcg_max) < 1.0 and spread <= 0.15
    return CheckResult(
        "algebraic-contraction",
        passed,
        "multigrid max ratios "
        + ", ".join(f"{q:.3f}" for q in multigrid_max)
        + f" (spread {spread:.3f}); pcg max ratio {max(pcg_max):.3f}",
    )


def _minimal_cardinality(values: np.ndarray, theta: float) -> int:
    target = theta * math.fsum(values)
    for size in range(1, len(values) + 1):
        for subset in itertools.combinations(values, size):
            if math.fsum(subset) >= target:
                return size
    return len(values)


def check_dorfler_minimality(rng: np.random.Generator, samples: int = 200) -> CheckResult:
    """Greedy marking reaches the threshold with the minimal number of elements."""
    thetas = np.round(np.arange(0.1, 1.0, 0.1), 1)
    for sample in range(samples):
        values = rng.exponential(size=int(rng.integers(1, 13))) ** 2
        theta = float(rng.choice(thetas))
        marked = dorfler_mark(values, theta)
        if theta * math.fsum(values) > math.fsum(values[marked]):
            return CheckResult("dorfler-minimality", False, f"threshold missed in sample {sample}")
        if len(marked) != _minimal_cardinality(values, theta):
            return CheckResult("dorfler-minimality", False, f"non-minimal set in sample {sample}")
    return CheckResult("dorfler-minimality", True, f"{samples} random indicator vectors")


def check_potential(rng: np.random.Generator, states: int = 20) -> CheckResult:
    """Central differences of the energy converge to the residual at second order."""
    worst = math.inf
    for name, mesh in (("sine-gordon", unit_square()), ("singular-sine-gordon", l_shape())):
        prob = make_problem(name)
        space = build_space(uniform_refine(mesh, 2), 2)
        matrix = assemble_inner_product(space, prob)
        for _ in range(states):
            u = rng.standard_normal(space.n_dofs)
            u[space.dirichlet_mask] = 0.0
            phi = rng.standard_normal(space.n_dofs)
            phi[space.dirichlet_mask] = 0.0
            phi /= np.linalg.norm(phi)
            exact = -float(apply_nonlinear_residual(FeFunction(space, u), prob, matrix) @ phi)

            def difference(t):
                plus = energy(FeFunction(space, u + t * phi), prob, matrix)
                minus = energy(FeFunction(space, u - t * phi), prob, matrix)
                return abs((plus - minus) / (2.0 * t) - exact)

            coarse, fine = difference(1e-2), difference(5e-3)
            if fine < 1e-11:
                continue
            order = math.log2(coarse / fine)
            worst = min(worst, order)
            if order < 1.9:
                return CheckResult("potential", False, f"{name}: observed order {order:.2f}")
    detail = "roundoff level" if math.isinf(worst) else f"worst observed order {worst:.2f}"
    return CheckResult("potential", True, detail)


def check_linear_fixed_point() -> CheckResult:
    """For a linear problem one exact linearization step with damping 1 is the Galerkin solution."""
    prob = linear_poisson()
    space = build_space(uniform_refine(unit_square(), 3), 1)
    matrix, rhs = zarantonello_system(FeFunction.zeros(space), prob, 1.0)
    step = direct_solve(matrix, rhs, space.free_dofs)
    reference = reference_solve(space, prob).coefficients
    gap = float(np.max(np.abs(step - reference)))
    return CheckResult("linear-fixed-point", gap <= 1e-10, f"max deviation {gap:.2e}")


def run_checks(seed: int = 42, fault: Optional[str] = None) -> List[CheckResult]:
    """Run every property check with a generator seeded by ``seed``.

    Args:
        seed: Random seed.
        fault: ``flip-jump`` flips the sign of one side of the estimator jumps.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault '{fault}', expected one of {FAULTS}")
    rng = np.random.default_rng(seed)
    checks: List[Callable[[], CheckResult]] = [
        lambda: check_mesh_refinement(rng),
        lambda: check_estimator_reduction(rng, flip_jump_sign=fault == "flip-jump"),
        lambda: check_algebraic_contraction(rng),
        lambda: check_dorfler_minimality(rng),
        lambda: check_potential(rng),
        check_linear_fixed_point,
    ]
    results = []
    for check in checks:
        result = check()
        logger.info("%s %s: %s", "PASS" if result.passed else "FAIL", result.name, result.detail)
        results.append(result)
    return results


def format_report(results: List[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}" for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
