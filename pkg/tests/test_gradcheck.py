"""
Unit tests for the finite-difference gradient checker.

Run with: pytest tests/test_gradcheck.py -v
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.gradcheck import MAX_COORDS, STEP, check_gradients, network_check, primitive_checks
from src.tensorcore import Tensor, mul, sum_all


class TestCheckGradients:
    """Tests for check_gradients."""

    @pytest.mark.parametrize("name", sorted(primitive_checks(0)))
    def test_primitive_passes(self, name):
        """Test that every primitive's backward matches central differences."""
        fn, arrays = primitive_checks(0)[name]
        result = check_gradients(name, fn, arrays, np.random.default_rng(0), max_coords=40)
        assert result.passed, f"{name}: {result.max_error:.2e}"

    def test_network_passes(self):
        """Test the full multi-task forward with the perturbed path."""
        fn, arrays = network_check(1)
        result = check_gradients("network", fn, arrays, np.random.default_rng(1))
        assert result.passed, f"network: {result.robust_error:.2e}"
        assert result.n_coords == MAX_COORDS

    def test_detects_wrong_gradient(self):
        """Test that an input read outside the graph is caught."""
        def leaky(t):
            # the second factor is a constant copy, so backward sees half the slope
            return sum_all(mul(t["a"], Tensor(t["a"].data.copy())))

        arrays = {"a": np.linspace(0.5, 2.0, 6)}
        result = check_gradients("leaky", leaky, arrays, np.random.default_rng(0))
        assert not result.passed
        assert result.max_error == pytest.approx(0.5, abs=1e-4)

    def test_coordinate_cap(self):
        """Test that small inputs are checked exhaustively."""
        arrays = {"a": np.ones(5)}
        result = check_gradients("sum", lambda t: sum_all(mul(t["a"], t["a"])), arrays, np.random.default_rng(0))
        assert result.n_coords == 5
        assert result.fraction_ok == 1.0

    def test_central_difference_step(self):
        """Test that the default step is 1e-3: on a^3 the central difference is off by h^2."""
        arrays = {"a": np.ones(3)}
        result = check_gradients("cube", lambda t: sum_all(mul(mul(t["a"], t["a"]), t["a"])),
                                 arrays, np.random.default_rng(0))
        assert STEP == 1e-3
        assert result.max_error == pytest.approx(STEP ** 2 / (3 + STEP ** 2), rel=1e-4)
        assert result.passed

    def test_relu_inputs_avoid_kink(self):
        """Test that relu inputs sit farther from 0 than the step."""
        _, arrays = primitive_checks(3)["relu"]
        assert np.abs(arrays["a"]).min() > 10 * STEP
