"""Tests for the contractive algebraic solvers."""
import logging

import numpy as np
import pytest

from tests.conftest import adaptive_meshes
from zarafem.exceptions import (
    InvalidParameterError,
    NonFiniteValueError,
    NonNestedSpaceError,
    SolverError,
)
from zarafem.forms import ProblemSpec, assemble_inner_product, load_vector
from zarafem.linsolve import (
    DirectSolver,
    LevelHierarchy,
    MultigridSolver,
    PCGSolver,
    SolverConfig,
    direct_solve,
    make_solver,
    measure_contraction,
    solver_step,
)
from zarafem.mesh import refine, uniform_refine
from zarafem.space import build_space


def system(space, prob):
    return assemble_inner_product(space, prob), load_vector(space, prob)


def uniform_hierarchy(mesh, prob, levels):
    """Hierarchy of P1 spaces on successive uniform refinements of ``mesh``."""
    hierarchy = LevelHierarchy(prob)
    hierarchy.add_level(build_space(mesh, 1))
    for _ in range(levels):
        mesh = uniform_refine(mesh, 1)
        hierarchy.add_level(build_space(mesh, 1))
    return hierarchy


class TestSolverConfig:
    """Test solver settings validation."""

    def test_defaults(self):
        """Test the default solver is a symmetric V-cycle."""
        config = SolverConfig()
        assert config.kind == "multigrid"
        assert config.pre_sweeps == config.post_sweeps == 1

    @pytest.mark.parametrize(
        "options",
        [
            {"kind": "gmres"},
            {"preconditioner": "ilu"},
            {"pre_sweeps": 0},
            {"damping": 0.0},
            {"damping": 1.5},
            {"direct_max_dofs": 0},
        ],
    )
    def test_invalid(self, options):
        """Test invalid settings are rejected."""
        with pytest.raises(InvalidParameterError):
            SolverConfig(**options)


class TestDirectSolver:
    """Test the exact solver."""

    def test_step_returns_solution(self, fine_square, poisson):
        """Test one step solves the free block and zeroes Dirichlet entries."""
        space = build_space(fine_square, 2)
        matrix, load = system(space, poisson)
        solver = DirectSolver(matrix, space.free_dofs)
        x = solver_step(solver, load, np.ones(space.n_dofs))
        free = space.free_dofs
        np.testing.assert_allclose((matrix @ x)[free], load[free], atol=1e-12)
        assert not x[space.dirichlet_mask].any()

    def test_direct_solve_matches_solver(self, p1_space, poisson):
        """Test the functional form agrees with the solver class."""
        matrix, load = system(p1_space, poisson)
        x = direct_solve(matrix, load, p1_space.free_dofs)
        y = DirectSolver(matrix, p1_space.free_dofs).step(load, np.zeros_like(load))
        np.testing.assert_allclose(x, y)

    def test_dof_cap(self, p1_space, poisson):
        """Test systems above the cap are refused."""
        matrix, load = system(p1_space, poisson)
        with pytest.raises(SolverError, match="cap"):
            direct_solve(matrix, load, p1_space.free_dofs, max_dofs=5)

    def test_no_free_dofs(self, square, poisson):
        """Test a P1 space on two triangles has nothing to solve."""
        space = build_space(square, 1)
        matrix, load = system(space, poisson)
        x = DirectSolver(matrix, space.free_dofs).step(load, np.ones(space.n_dofs))
        assert not x.any()

    def test_non_finite_input(self, p1_space, poisson):
        """Test NaN in the right-hand side is reported."""
        matrix, load = system(p1_space, poisson)
        load[5] = np.nan
        with pytest.raises(NonFiniteValueError, match="right-hand side"):
            DirectSolver(matrix, p1_space.free_dofs).step(load, np.zeros_like(load))

    def test_wrong_vector_length(self, p1_space, poisson):
        """Test vectors must cover all DOFs."""
        matrix, load = system(p1_space, poisson)
        with pytest.raises(ValueError, match="full-length"):
            DirectSolver(matrix, p1_space.free_dofs).step(load[:-1], load[:-1])


class TestPCGSolver:
    """Test one-iteration-per-step conjugate gradients."""

    @pytest.mark.parametrize("preconditioner", ["jacobi", "none"])
    def test_monotone_energy_error(self, fine_square, poisson, preconditioner):
        """Test consecutive steps decrease the energy error."""
        space = build_space(fine_square, 2)
        matrix, load = system(space, poisson)
        config = SolverConfig(kind="pcg", preconditioner=preconditioner)
        solver = PCGSolver(matrix, space.free_dofs, config)
        ratios = measure_contraction(solver, load, 5)
        assert np.all(ratios < 1.0)

    def test_converges_in_n_free_steps(self, p1_space, poisson):
        """Test CG reaches the exact solution after as many steps as unknowns."""
        matrix, load = system(p1_space, poisson)
        solver = PCGSolver(matrix, p1_space.free_dofs)
        x = np.zeros_like(load)
        for _ in range(p1_space.n_free):
            x = solver.step(load, x)
        exact = direct_solve(matrix, load, p1_space.free_dofs)
        np.testing.assert_allclose(x, exact, atol=1e-10)

    def test_restart_after_reset(self, p1_space, poisson):
        """Test reset makes the next step equal to a fresh solver's first step."""
        matrix, load = system(p1_space, poisson)
        solver = PCGSolver(matrix, p1_space.free_dofs)
        x = solver.step(load, np.zeros_like(load))
        solver.step(load, x)
        solver.reset()
        fresh = PCGSolver(matrix, p1_space.free_dofs)
        np.testing.assert_allclose(solver.step(load, x), fresh.step(load, x))

    def test_restart_on_new_rhs(self, p1_space, poisson):
        """Test a changed right-hand side restarts the Krylov space."""
        matrix, load = system(p1_space, poisson)
        solver = PCGSolver(matrix, p1_space.free_dofs)
        x = solver.step(load, np.zeros_like(load))
        fresh = PCGSolver(matrix, p1_space.free_dofs)
        np.testing.assert_allclose(solver.step(2.0 * load, x), fresh.step(2.0 * load, x))

    def test_logged_contraction(self, p1_space, poisson):
        """Test log_contraction records one ratio per step."""
        matrix, load = system(p1_space, poisson)
        config = SolverConfig(kind="pcg", log_contraction=True)
        solver = PCGSolver(matrix, p1_space.free_dofs, config)
        x = np.zeros_like(load)
        for _ in range(3):
            x = solver.step(load, x)
        assert len(solver.ratios) == 3
        assert max(solver.ratios) < 1.0


class TestMultigrid:
    """Test the local multigrid V-cycle."""

    def test_uniform_contraction(self, square, poisson):
        """Test the V-cycle contracts on uniformly refined levels."""
        hierarchy = uniform_hierarchy(uniform_refine(square, 2), poisson, 5)
        solver = MultigridSolver(hierarchy)
        ratios = measure_contraction(solver, load_vector(hierarchy.finest.space, poisson), 5)
        assert np.all(ratios < 0.9)

    def test_adaptive_contraction(self, rng, lshape, poisson):
        """Test the V-cycle contracts on randomly graded meshes."""
        hierarchy = LevelHierarchy(poisson)
        for mesh in adaptive_meshes(rng, uniform_refine(lshape, 2), levels=6):
            hierarchy.add_level(build_space(mesh, 1))
        solver = MultigridSolver(hierarchy)
        ratios = measure_contraction(solver, load_vector(hierarchy.finest.space, poisson), 5)
        assert np.all(ratios < 1.0)

    def test_smoothing_set_is_local(self, square, poisson):
        """Test a single bisection smooths only around the new vertex."""
        fine_mesh = uniform_refine(square, 6)
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(build_space(fine_mesh, 1))
        marked, _ = fine_mesh.locate([(0.4, 0.45)])
        level = hierarchy.add_level(build_space(refine(fine_mesh, marked), 1))
        assert 0 < len(level.smoothing_set) < level.space.n_free

    def test_single_level_is_exact(self, fine_square, poisson):
        """Test a one-level hierarchy is a direct solve."""
        space = build_space(fine_square, 1)
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(space)
        load = load_vector(space, poisson)
        x = MultigridSolver(hierarchy).step(load, np.zeros_like(load))
        exact = direct_solve(hierarchy.finest.matrix, load, space.free_dofs)
        np.testing.assert_allclose(x, exact, atol=1e-12)

    def test_empty_hierarchy(self, poisson):
        """Test multigrid needs at least one level."""
        with pytest.raises(SolverError):
            MultigridSolver(LevelHierarchy(poisson))

    def test_unrelated_level(self, square, lshape, poisson):
        """Test levels must be nested."""
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(build_space(square, 1))
        with pytest.raises(NonNestedSpaceError):
            hierarchy.add_level(build_space(uniform_refine(lshape, 1), 1))

    def test_galerkin_coarse_operators(self, rng, lshape):
        """Test P^T K_fine P reproduces every coarse free block."""
        prob = ProblemSpec(
            name="anisotropic-reaction",
            source=lambda x, y: np.ones_like(x),
            diffusion=np.array([[2.0, 0.5], [0.5, 1.0]]),
            reaction_weight=3.0,
        )
        hierarchy = LevelHierarchy(prob)
        for mesh in adaptive_meshes(rng, uniform_refine(lshape, 1), levels=5):
            hierarchy.add_level(build_space(mesh, 1))
        for coarse, fine in zip(hierarchy.levels, hierarchy.levels[1:]):
            galerkin = fine.prolongation.T @ fine.system @ fine.prolongation
            assert abs(galerkin - coarse.system).max() < 1e-12

    def test_smoothing_sets_follow_mesh_hierarchy(self, rng, lshape, poisson):
        """Test every free new vertex of a level is smoothed on that level."""
        hierarchy = LevelHierarchy(poisson)
        meshes = adaptive_meshes(rng, uniform_refine(lshape, 1), levels=4)
        for mesh in meshes:
            hierarchy.add_level(build_space(mesh, 1))
        assert hierarchy.meshes.meshes == meshes
        for coarse, level, new in zip(
            meshes, hierarchy.levels[1:], hierarchy.meshes.new_vertex_sets[1:]
        ):
            np.testing.assert_array_equal(new, np.arange(coarse.n_vertices, level.space.n_dofs))
            free_new = new[np.isin(new, level.space.free_dofs)]
            positions = np.searchsorted(level.space.free_dofs, free_new)
            assert np.isin(positions, level.smoothing_set).all()

    def test_level_several_refinements_below(self, square, poisson):
        """Test a level may skip meshes and then smooths around all vertices created since."""
        base = uniform_refine(square, 2)
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(build_space(base, 1))
        fine = uniform_refine(base, 2)
        level = hierarchy.add_level(build_space(fine, 1))
        np.testing.assert_array_equal(
            hierarchy.meshes.new_vertex_sets[-1], np.arange(base.n_vertices, fine.n_vertices)
        )
        assert len(level.smoothing_set) == level.space.n_free

    def test_same_mesh_twice(self, fine_square, poisson):
        """Test a level on the finest mesh again is rejected."""
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(build_space(fine_square, 1))
        with pytest.raises(NonNestedSpaceError, match="not refined"):
            hierarchy.add_level(build_space(fine_square, 1))


class TestMakeSolver:
    """Test solver selection."""

    def test_kinds(self, p1_space, poisson):
        """Test each kind gives the matching solver class."""
        matrix = assemble_inner_product(p1_space, poisson)
        assert isinstance(make_solver(SolverConfig(kind="direct"), p1_space, matrix), DirectSolver)
        assert isinstance(make_solver(SolverConfig(kind="pcg"), p1_space, matrix), PCGSolver)
        assert isinstance(make_solver(SolverConfig(), p1_space, matrix), MultigridSolver)

    def test_multigrid_falls_back_for_higher_degree(self, fine_square, poisson, caplog):
        """Test p >= 2 uses PCG with a warning."""
        space = build_space(fine_square, 2)
        matrix = assemble_inner_product(space, poisson)
        with caplog.at_level(logging.WARNING, logger="zarafem.linsolve"):
            solver = make_solver(SolverConfig(), space, matrix)
        assert isinstance(solver, PCGSolver)
        assert "only available for p=1" in caplog.text

    def test_hierarchy_must_end_at_space(self, fine_square, poisson):
        """Test the finest level must be the solver's space."""
        hierarchy = LevelHierarchy(poisson)
        hierarchy.add_level(build_space(fine_square, 1))
        space = build_space(fine_square, 1)
        matrix = assemble_inner_product(space, poisson)
        with pytest.raises(SolverError, match="finest"):
            make_solver(SolverConfig(), space, matrix, hierarchy)
