"""
Unit tests for AdamW and the polynomial schedule.

Run with: pytest tests/test_optim.py -v
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import DimensionError, ParameterError
from src.optim import OptimState, adamw_step, poly_lr
from src.tensorcore import Tensor


def _param(value: float, grad: float) -> Tensor:
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad])
    return p


class TestAdamW:
    """Tests for adamw_step."""

    def test_no_grad_no_decay(self):
        """Test that zero gradient and zero decay leave the parameter unchanged."""
        p = _param(1.5, 0.0)
        adamw_step({"p": p}, OptimState(), 0.1, weight_decay=0.0)
        assert p.data[0] == pytest.approx(1.5)

    def test_decay_only(self):
        """Test lr 0.1, wd 0.01, theta 1 gives 0.999."""
        p = _param(1.0, 0.0)
        adamw_step({"p": p}, OptimState(), 0.1, weight_decay=0.01)
        assert p.data[0] == pytest.approx(0.999, abs=1e-6)

    def test_first_step_bias_correction(self):
        """Test that the first step moves by ~lr against the gradient sign."""
        p = _param(0.0, 1.0)
        adamw_step({"p": p}, OptimState(), 0.001, weight_decay=0.0)
        assert abs(p.data[0] + 0.001) < 1e-6

    def test_frozen_param_skipped(self):
        """Test that parameters without gradients are untouched and get no state."""
        p = Tensor(np.array([2.0]))
        state = OptimState()
        adamw_step({"p": p}, state, 0.1)
        assert p.data[0] == 2.0
        assert "p" not in state

    def test_per_parameter_rates(self):
        """Test that a mapping of learning rates is honoured."""
        a, b = _param(0.0, 1.0), _param(0.0, 1.0)
        adamw_step({"a": a, "b": b}, OptimState(), {"a": 0.001, "b": 0.0}, weight_decay=0.0)
        assert a.data[0] == pytest.approx(-0.001, abs=1e-6)
        assert b.data[0] == 0.0

    def test_step_counter(self):
        """Test that step counters advance per parameter."""
        p = _param(0.0, 1.0)
        state = OptimState()
        adamw_step({"p": p}, state, 0.001)
        adamw_step({"p": p}, state, 0.001)
        assert state.steps["p"] == 2

    def test_grad_shape_mismatch(self):
        """Test that a wrong-shaped gradient raises."""
        p = _param(0.0, 1.0)
        p.grad = np.zeros(2)
        with pytest.raises(DimensionError):
            adamw_step({"p": p}, OptimState(), 0.1)

    def test_negative_rate(self):
        """Test that a negative learning rate raises."""
        with pytest.raises(ParameterError):
            adamw_step({"p": _param(0.0, 1.0)}, OptimState(), -0.1)


class TestPolyLr:
    """Tests for poly_lr."""

    def test_start(self):
        """Test that step 0 returns the base rate."""
        assert poly_lr(1e-3, 0, 100) == pytest.approx(1e-3)

    def test_end(self):
        """Test that the last step returns 0."""
        assert poly_lr(1e-3, 100, 100) == 0.0

    def test_half_way_linear(self):
        """Test power 1 at the midpoint."""
        assert poly_lr(1e-3, 50, 100, power=1.0) == pytest.approx(5e-4)

    def test_out_of_range(self):
        """Test that steps past the end raise."""
        with pytest.raises(ParameterError):
            poly_lr(1e-3, 101, 100)
