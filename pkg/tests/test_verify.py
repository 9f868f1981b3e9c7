"""Tests for the property checks behind ``zarafem verify``."""
import numpy as np
import pytest

from zarafem.verify import (
    CheckResult,
    check_algebraic_contraction,
    check_dorfler_minimality,
    check_estimator_reduction,
    check_linear_fixed_point,
    check_mesh_refinement,
    check_potential,
    format_report,
    run_checks,
)


@pytest.fixture
def verify_rng():
    return np.random.default_rng(42)


class TestChecks:
    """Test each check at reduced size."""

    def test_mesh_refinement(self, verify_rng):
        """Test random refinements keep every mesh property."""
        result = check_mesh_refinement(verify_rng, levels=5)
        assert result.passed, result.detail
        assert "closure constant" in result.detail

    def test_estimator_reduction(self, verify_rng):
        """Test indicators on new elements shrink by the reduction factor."""
        result = check_estimator_reduction(verify_rng, refinements=3, functions=2)
        assert result.passed, result.detail

    def test_flipped_jumps_are_caught(self, verify_rng):
        """Test the reduction check fails when jumps add the one-sided fluxes."""
        result = check_estimator_reduction(
            verify_rng, refinements=3, functions=5, flip_jump_sign=True
        )
        assert not result.passed
        assert "exceeds" in result.detail

    def test_algebraic_contraction(self, verify_rng):
        """Test contraction ratios are reported for every measured level."""
        result = check_algebraic_contraction(verify_rng, levels=4, steps=4)
        assert result.name == "algebraic-contraction"
        assert result.detail.startswith("multigrid max ratios")
        assert "pcg max ratio" in result.detail

    def test_dorfler_minimality(self, verify_rng):
        """Test marking against exhaustive search."""
        result = check_dorfler_minimality(verify_rng, samples=30)
        assert result.passed, result.detail

    def test_potential(self, verify_rng):
        """Test the energy is a potential of the residual."""
        result = check_potential(verify_rng, states=2)
        assert result.passed, result.detail

    def test_linear_fixed_point(self):
        """Test one full Zarantonello step solves the linear problem."""
        result = check_linear_fixed_point()
        assert result.passed, result.detail


class TestRunChecks:
    """Test the check runner and report."""

    def test_unknown_fault(self):
        """Test unknown faults are rejected before any check runs."""
        with pytest.raises(ValueError, match="unknown fault"):
            run_checks(fault="drop-volume")

    def test_format_report(self):
        """Test one line per check and a closing count."""
        report = format_report(
            [CheckResult("a", True, "fine"), CheckResult("b", False, "broken")]
        )
        lines = report.splitlines()
        assert lines[0] == "PASS  a: fine"
        assert lines[1] == "FAIL  b: broken"
        assert lines[-1] == "1/2 checks passed"

    @pytest.mark.slow
    def test_full_suite_passes(self):
        """Test every check passes with the default seed."""
        results = run_checks()
        assert len(results) == 6
        assert all(r.passed for r in results), format_report(results)

    @pytest.mark.slow
    def test_fault_fails_suite(self):
        """Test the injected fault is detected."""
        results = run_checks(fault="flip-jump")
        failed = [r.name for r in results if not r.passed]
        assert "estimator-reduction" in failed
