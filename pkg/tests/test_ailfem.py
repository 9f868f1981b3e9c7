"""Tests for marking, linearization and the adaptive driver."""
import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.sparse.linalg import splu

from zarafem.ailfem import (
    AdaptiveDriver,
    AdaptiveParams,
    admissible_params,
    dorfler_mark,
    quasi_error,
    reference_solve,
    run_adaptive,
    zarantonello_system,
)
from zarafem.estimator import Indicators
from zarafem.exceptions import InvalidParameterError, IterationCapError, SolverError
from zarafem.forms import (
    apply_nonlinear_residual,
    assemble_inner_product,
    energy,
    energy_norm,
    load_vector,
)
from zarafem.ledger import recompute_cost
from zarafem.linsolve import SolverConfig, direct_solve
from zarafem.mesh import uniform_refine
from zarafem.space import FeFunction, build_space, interpolate

DIRECT = SolverConfig(kind="direct")


def run(prob, solver=DIRECT, mesh=None, **options):
    return run_adaptive(prob, AdaptiveParams(**options), mesh=mesh, solver_config=solver)


class TestAdaptiveParams:
    """Test parameter validation."""

    def test_defaults(self):
        """Test the default parameters."""
        params = AdaptiveParams()
        assert (params.theta, params.lambda_lin, params.lambda_alg) == (0.3, 0.7, 0.3)
        assert params.degree == 1
        assert math.isinf(params.norm_cap)

    @pytest.mark.parametrize(
        "options",
        [
            {"theta": 0.0},
            {"theta": 1.5},
            {"lambda_lin": 0.0},
            {"lambda_alg": -1.0},
            {"delta": 0.0},
            {"i_min": 0},
            {"norm_cap": -1.0},
            {"stop_estimator_tol": -1.0},
            {"max_levels": -1},
            {"max_cost": 0},
            {"max_dofs": 0},
            {"degree": 4},
            {"max_inner": 0},
        ],
    )
    def test_invalid(self, options):
        """Test out-of-range parameters are rejected."""
        with pytest.raises(InvalidParameterError):
            AdaptiveParams(**options)


class TestDorflerMark:
    """Test minimal bulk marking."""

    @pytest.mark.parametrize(
        "values,theta,expected",
        [
            ([4.0, 1.0, 1.0, 1.0, 1.0], 0.5, [0]),
            ([1.0, 1.0, 1.0, 1.0], 0.5, [0, 1]),
            ([1.0, 0.0, 1.0], 1.0, [0, 2]),
            ([1.0, 3.0, 2.0], 0.5, [1]),
            ([1.0, 3.0, 2.0], 0.6, [1, 2]),
            ([0.0, 0.0], 0.5, []),
        ],
    )
    def test_examples(self, values, theta, expected):
        """Test marked sets of small indicator vectors."""
        np.testing.assert_array_equal(dorfler_mark(values, theta), expected)

    def test_indicators_input(self, square):
        """Test Indicators objects are accepted."""
        ind = Indicators(values=[1.0, 3.0], mesh=square)
        np.testing.assert_array_equal(dorfler_mark(ind, 0.5), [1])

    def test_bulk_and_minimality(self, rng):
        """Test the marked set reaches the bulk and no smaller set does."""
        for _ in range(20):
            values = rng.random(50) ** 3
            theta = rng.uniform(0.05, 1.0)
            marked = dorfler_mark(values, theta)
            total = math.fsum(values)
            assert math.fsum(values[marked]) >= theta * total
            largest = np.sort(values)[::-1][: len(marked) - 1]
            assert math.fsum(largest) < theta * total

    def test_invalid_theta(self):
        """Test theta outside (0, 1] is rejected."""
        with pytest.raises(InvalidParameterError):
            dorfler_mark([1.0], 0.0)


class TestAdmissibleParams:
    """Test the optimality conditions."""

    def test_plain_theta(self):
        """Test lambda_lin = 0 keeps theta and q = 0.5 needs two steps."""
        result = admissible_params(0.3, 0.0, 0.5)
        assert result.theta_mark == pytest.approx(0.3)
        assert result.theta_star == pytest.approx(0.5)
        assert result.i_min == 2
        assert result.ok

    def test_fast_solver_needs_one_step(self):
        """Test q <= 1/3 gives i_min = 1."""
        assert admissible_params(0.3, 0.0, 0.3).i_min == 1

    def test_large_ratio_not_admissible(self):
        """Test a large lambda_lin ratio violates theta_mark < theta*."""
        result = admissible_params(0.3, 0.5, 0.3)
        assert result.theta_mark > 1.0
        assert not result.ok

    @pytest.mark.parametrize("args", [(0.3, 1.0, 0.5), (0.3, 0.1, 1.0), (0.0, 0.1, 0.5)])
    def test_invalid(self, args):
        """Test out-of-range arguments are rejected."""
        with pytest.raises(InvalidParameterError):
            admissible_params(*args)


class TestLinearization:
    """Test Zarantonello steps and the reference solver."""

    def test_full_step_solves_linear_problem(self, p1_space, poisson):
        """Test delta = 1 reaches the discrete solution of a linear problem in one step."""
        matrix, rhs = zarantonello_system(FeFunction.zeros(p1_space), poisson, 1.0)
        assert not rhs[p1_space.dirichlet_mask].any()
        u = direct_solve(matrix, rhs, p1_space.free_dofs)
        exact = direct_solve(matrix, load_vector(p1_space, poisson), p1_space.free_dofs)
        np.testing.assert_allclose(u, exact, atol=1e-12)

    def test_invalid_delta(self, p1_space, poisson):
        """Test delta must be positive."""
        with pytest.raises(InvalidParameterError, match="delta"):
            zarantonello_system(FeFunction.zeros(p1_space), poisson, 0.0)

    def test_exact_steps_decrease_energy(self, p1_space, sine):
        """Test exactly solved linearization steps never increase the energy."""
        matrix = assemble_inner_product(p1_space, sine)
        load = load_vector(p1_space, sine)
        u = FeFunction.zeros(p1_space)
        energies = [energy(u, sine, matrix, load)]
        for _ in range(8):
            _, rhs = zarantonello_system(u, sine, 0.3, matrix, load)
            u = FeFunction(p1_space, direct_solve(matrix, rhs, p1_space.free_dofs))
            energies.append(energy(u, sine, matrix, load))
        assert np.all(np.diff(energies) <= 1e-12)

    def test_reference_solve_nonlinear(self, fine_square, sine):
        """Test Newton drives the nonlinear residual to zero."""
        space = build_space(fine_square, 2)
        u = reference_solve(space, sine)
        residual = apply_nonlinear_residual(u, sine)
        load = load_vector(space, sine)
        assert np.linalg.norm(residual) <= 1e-9 * np.linalg.norm(load[space.free_dofs])

    def test_reference_solve_linear(self, p1_space, poisson):
        """Test the reference solution of a linear problem is the direct solution."""
        u = reference_solve(p1_space, poisson)
        matrix = assemble_inner_product(p1_space, poisson)
        exact = direct_solve(matrix, load_vector(p1_space, poisson), p1_space.free_dofs)
        np.testing.assert_allclose(u.coefficients, exact, atol=1e-12)

    def test_reference_solve_cap(self, p1_space, sine):
        """Test the reference solver refuses large systems."""
        with pytest.raises(SolverError):
            reference_solve(p1_space, sine, max_dofs=3)

    def test_reference_solve_without_unknowns(self, square, sine):
        """Test a space without free DOFs gives the zero function."""
        assert not reference_solve(build_space(square, 1), sine).coefficients.any()

    def test_quasi_error(self, p1_space, poisson):
        """Test the quasi-error collapses to eta when all three functions coincide."""
        u = interpolate(p1_space, lambda x, y: x * (1 - x) * y * (1 - y)).coefficients
        assert quasi_error(p1_space, poisson, u, u, u, 0.25) == pytest.approx(0.25)
        shifted = interpolate(p1_space, lambda x, y: x).coefficients + u
        assert quasi_error(p1_space, poisson, u, u, shifted, 0.25) == pytest.approx(1.25)

    def test_reference_solve_warns_on_stagnation(self, p1_space, poisson, monkeypatch, caplog):
        """Test accepting a stalled Newton solve is logged with the residual reached."""
        factors = []

        def stalling_splu(matrix):
            factors.append(splu(matrix))
            if len(factors) == 1:
                return factors[0]
            return SimpleNamespace(solve=np.zeros_like)

        monkeypatch.setattr("zarafem.ailfem.splu", stalling_splu)
        with caplog.at_level(logging.WARNING, logger="zarafem.ailfem"):
            u = reference_solve(p1_space, poisson, tol=0.0)
        assert len(factors) == 2
        assert "newton stagnated after 1 steps at residual" in caplog.text
        matrix = assemble_inner_product(p1_space, poisson)
        exact = direct_solve(matrix, load_vector(p1_space, poisson), p1_space.free_dofs)
        np.testing.assert_allclose(u.coefficients, exact, atol=1e-10)


class TestAdaptiveDriver:
    """Test complete adaptive runs."""

    def test_max_levels(self, poisson):
        """Test the ledger structure of a short run."""
        ledger = run(poisson, max_levels=2, delta=1.0)
        assert ledger.termination_reason == "max_levels"
        assert len(ledger.levels) == 3
        indices = [r.index for r in ledger.records]
        assert indices == sorted(indices)
        assert [r.level for r in ledger.final_records()] == [0, 1, 2]
        costs = [r.cost for r in ledger.records]
        np.testing.assert_array_equal(recompute_cost(ledger.records), costs)
        assert ledger.mesh_name == "unit-square"

    def test_final_flags(self, sine):
        """Test every linearization step ends with one final algebraic iterate."""
        ledger = run(sine, solver=SolverConfig(), max_levels=3, i_min=2)
        for previous, current in zip(ledger.records, ledger.records[1:]):
            if (current.level, current.k) != (previous.level, previous.k):
                assert previous.is_final_i
                assert previous.i >= 2
            if current.level != previous.level:
                assert previous.is_final_k
        assert ledger.records[-1].is_final_k

    def test_meshes_grow(self, sine):
        """Test refinement strictly increases the triangle count."""
        ledger = run(sine, solver=SolverConfig(), max_levels=4)
        triangles = [s.n_triangles for s in ledger.levels]
        assert all(b > a for a, b in zip(triangles, triangles[1:]))
        assert all(s.n_marked > 0 for s in ledger.levels[:-1])
        assert ledger.levels[-1].n_marked == 0

    def test_uniform_refinement(self, poisson):
        """Test uniform mode bisects every triangle once per level."""
        ledger = run(poisson, max_levels=3, uniform=True, delta=1.0)
        assert [s.n_triangles for s in ledger.levels] == [2, 4, 8, 16]

    def test_tolerance(self, poisson):
        """Test a reachable estimator tolerance ends the run."""
        first = run(poisson, max_levels=3, delta=1.0)
        tol = first.final_eta * 1.0001
        ledger = run(poisson, max_levels=10, delta=1.0, stop_estimator_tol=tol)
        assert ledger.termination_reason == "tolerance"
        assert ledger.final_eta < tol
        assert len(ledger.levels) <= 4

    def test_tolerance_is_strict(self, poisson):
        """Test an estimator equal to the tolerance does not end the run."""
        tol = run(poisson, max_levels=0, delta=1.0).final_eta
        ledger = run(poisson, max_levels=1, delta=1.0, stop_estimator_tol=tol)
        assert ledger.levels[0].eta == tol
        assert len(ledger.levels) == 2

    def test_max_cost(self, poisson):
        """Test the cost budget stops after the first level."""
        ledger = run(poisson, max_cost=1, delta=1.0)
        assert ledger.termination_reason == "max_cost"
        assert len(ledger.levels) == 1

    def test_max_dofs(self, poisson):
        """Test meshes beyond the DOF budget are never solved on."""
        ledger = run(poisson, max_dofs=5, delta=1.0)
        assert ledger.termination_reason == "max_dofs"
        assert all(r.dofs <= 5 for r in ledger.records)

    def test_iteration_cap_keeps_ledger(self, poisson):
        """Test a cap violation raises with the partial ledger attached."""
        params = AdaptiveParams(i_min=3, max_inner=2)
        with pytest.raises(IterationCapError) as excinfo:
            run_adaptive(poisson, params, solver_config=DIRECT)
        ledger = excinfo.value.ledger
        assert ledger.termination_reason == "iteration_cap"
        assert len(ledger.records) == 2

    def test_norm_cap_blocks_exit(self, poisson, square):
        """Test the linearization loop cannot finish while the iterate exceeds the cap."""
        params = AdaptiveParams(norm_cap=0.0, max_outer=3, delta=1.0)
        with pytest.raises(IterationCapError, match="linearization"):
            run_adaptive(poisson, params, mesh=uniform_refine(square, 2), solver_config=DIRECT)

    def test_exact_error_on_final_iterates(self, poisson):
        """Test exact errors are recorded exactly at final iterates."""
        ledger = run(poisson, max_levels=2, delta=1.0)
        for record in ledger.records:
            assert (record.exact_error is not None) == record.is_final_k
        assert ledger.levels[-1].exact_error == ledger.final_records()[-1].exact_error

    def test_exact_error_tracking_disabled(self, poisson):
        """Test track_exact_error=False skips the error computation."""
        ledger = run(poisson, max_levels=1, delta=1.0, track_exact_error=False)
        assert all(r.exact_error is None for r in ledger.records)

    def test_callback_and_custom_mesh(self, poisson, square):
        """Test the callback sees every iterate and custom meshes are labelled."""
        seen = []
        driver = AdaptiveDriver(
            poisson,
            AdaptiveParams(max_levels=1, delta=1.0),
            DIRECT,
            mesh=uniform_refine(square, 1),
            on_iterate=lambda record, state, w: seen.append((record.index, len(w))),
        )
        ledger = driver.run()
        assert [index for index, _ in seen] == [r.index for r in ledger.records]
        assert ledger.mesh_name == "custom"

    def test_multigrid_contraction_logged(self, sine):
        """Test V-cycle contractions are logged over the run."""
        ledger = run(sine, solver=SolverConfig(log_contraction=True), max_levels=4)
        assert ledger.contraction_ratios
        assert np.median(ledger.contraction_ratios) < 1.0

    @pytest.mark.parametrize("degree", [2, 3])
    def test_higher_degree(self, sine, degree):
        """Test higher degrees run with the PCG fallback."""
        ledger = run(sine, solver=SolverConfig(), max_levels=2, degree=degree)
        assert ledger.termination_reason == "max_levels"
        assert ledger.final_eta < ledger.final_records()[0].eta


def captured_run(prob, params, solver=DIRECT, mesh=None):
    """Run the driver and keep a copy of every iterate with its level data."""
    iterates = []

    def capture(record, state, w):
        iterates.append((record, state.space, state.matrix, state.load, state.u.copy(), w.copy()))

    ledger = AdaptiveDriver(prob, params, solver, mesh=mesh, on_iterate=capture).run()
    return ledger, iterates


class TestStoppingCriteria:
    """Test the inner and outer stopping decisions against the recorded iterates."""

    def test_minimal_algebra_steps_with_exact_solver(self, sine):
        """Test a direct solver still takes exactly i_min steps per linearization step."""
        ledger = run(sine, max_levels=2, i_min=3, delta=0.3)
        groups = {}
        for record in ledger.records:
            groups.setdefault((record.level, record.k), []).append(record)
        assert len(groups) >= 3
        for records in groups.values():
            assert [r.i for r in records] == [1, 2, 3]
            assert [r.is_final_i for r in records] == [False, False, True]
            scale = max(records[0].energy_norm, 1.0)
            assert all(r.norm_update <= 1e-10 * scale for r in records[1:])

    @pytest.mark.parametrize("solver", [DIRECT, SolverConfig(), SolverConfig(kind="pcg")])
    def test_decisions_match_criteria(self, sine, solver):
        """Test every final flag equals a recomputation of the stopping criteria."""
        params = AdaptiveParams(max_levels=3, delta=0.3, i_min=2, lambda_alg=0.5)
        ledger, iterates = captured_run(sine, params, solver)
        assert len(iterates) == len(ledger.records)
        for record, space, matrix, load, start, w in iterates:
            distance = energy_norm(space, sine, w - start, matrix)
            inner_done = record.i >= params.i_min and record.norm_update <= params.lambda_alg * (
                params.lambda_lin * record.eta + distance
            )
            assert record.is_final_i == inner_done

            outer_done = False
            if record.is_final_i:
                decrease = energy(FeFunction(space, start), sine, matrix, load) - record.energy
                if abs(decrease) < params.energy_relax_tol:
                    outer_done = True
                else:
                    outer_done = max(decrease, 0.0) <= params.lambda_lin**2 * record.eta**2
            assert record.is_final_k == outer_done


class TestQuasiErrorContraction:
    """Test the quasi-error of the final iterates decays linearly over the levels."""

    def test_r_linear_decay(self, sine, square):
        """Test Delta_l' <= C q^(l' - l) Delta_l for a fitted q < 1 and a moderate C."""
        params = AdaptiveParams(
            max_levels=10, theta=0.5, delta=0.3, lambda_lin=0.5, track_exact_error=True
        )
        ledger, iterates = captured_run(sine, params, SolverConfig(), uniform_refine(square, 2))

        deltas = []
        for record, space, matrix, load, start, w in iterates:
            if not record.is_final_k:
                continue
            discrete = reference_solve(space, sine).coefficients
            _, rhs = zarantonello_system(FeFunction(space, start), sine, 0.3, matrix, load)
            linearized = direct_solve(matrix, rhs, space.free_dofs)
            deltas.append(quasi_error(space, sine, w, linearized, discrete, record.eta, matrix))

        assert len(deltas) == 11
        deltas = np.array(deltas)
        levels = np.arange(len(deltas))
        slope, _ = np.polyfit(levels, np.log(deltas), 1)
        q = math.exp(slope)
        assert q < 1.0
        constant = max(
            deltas[later] / (q ** (later - earlier) * deltas[earlier])
            for earlier in levels
            for later in levels[earlier:]
        )
        assert constant < 10.0

        finals = ledger.final_records()
        errors = np.array([r.exact_error for r in finals])
        assert np.all(errors <= deltas * 10.0)
        assert errors[-1] < errors[0]
