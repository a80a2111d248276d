"""Property tests for sonar_kd.core.functional."""

import math

import numpy as np
import pytest

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor, grad_check
from sonar_kd.core.functional import (
    PROB_EPS,
    bce,
    binary_entropy,
    kl_div,
    kl_div_log_input,
    log_softmax,
    mse,
    softmax,
)
from sonar_kd.errors import NonFiniteError, ShapeError

ROWS = 1000


def _distributions(rng, rows=ROWS, classes=6):
    z = rng.normal(size=(rows, classes))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestSoftmax:
    """Test softmax and log-softmax."""

    def test_rows_sum_to_one(self, rng):
        """Test normalization over 1000 random rows."""
        p = softmax(Tensor(rng.normal(scale=5.0, size=(ROWS, 7))), axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p >= 0.0)

    def test_shift_invariance(self, rng):
        """Test adding a constant per row leaves the output unchanged."""
        z = rng.normal(size=(ROWS, 5))
        c = rng.normal(scale=10.0, size=(ROWS, 1))
        a = softmax(Tensor(z)).data
        b = softmax(Tensor(z + c)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_large_logits_are_stable(self):
        """Test the max-subtracted form handles huge logits."""
        p = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        """Test the fused form against the composition."""
        z = rng.normal(scale=3.0, size=(ROWS, 5))
        np.testing.assert_allclose(log_softmax(Tensor(z)).data, np.log(softmax(Tensor(z)).data), atol=1e-9)

    def test_non_finite_rejected(self):
        """Test NaN and inf inputs raise NonFiniteError."""
        with pytest.raises(NonFiniteError):
            softmax(Tensor([0.0, np.nan]))
        with pytest.raises(NonFiniteError):
            log_softmax(Tensor([0.0, np.inf]))

    def test_non_finite_error_is_value_error(self):
        """Test callers catching ValueError still see the failure."""
        with pytest.raises(ValueError):
            softmax(Tensor([np.nan]))

    def test_bad_axis(self):
        """Test an out-of-range axis raises ShapeError."""
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((2, 3))), axis=2)


class TestMse:
    """Test mean squared error."""

    def test_identical_inputs(self, rng):
        """Test zero loss on identical inputs."""
        y = Tensor(rng.normal(size=(ROWS, 3)))
        assert mse(y, y).item() == 0.0

    def test_known_value(self):
        """Test a hand-computed value for each reduction."""
        y, yhat = Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 0.0, 4.0])
        assert mse(y, yhat).item() == pytest.approx(5.0 / 3.0)
        assert mse(y, yhat, reduction="sum").item() == pytest.approx(5.0)
        np.testing.assert_allclose(mse(y, yhat, reduction="none").data, [0.0, 4.0, 1.0])

    def test_shape_mismatch(self):
        """Test differing shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            mse(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_unknown_reduction(self):
        """Test an unknown reduction raises ValueError."""
        with pytest.raises(ValueError):
            mse(Tensor([1.0]), Tensor([1.0]), reduction="max")


class TestBce:
    """Test binary cross-entropy."""

    def test_perfect_predictions(self):
        """Test p = y in {0, 1} gives zero up to the clamp."""
        p = Tensor([1.0, 0.0, 1.0])
        assert bce(p, p).item() == pytest.approx(0.0, abs=1e-6)

    def test_soft_target_minimum(self, rng):
        """Test BCE(p, y) is minimized at p = y, where it equals the binary entropy."""
        y = rng.uniform(0.01, 0.99, size=ROWS)
        at_target = bce(Tensor(y), Tensor(y), reduction="none").data
        np.testing.assert_allclose(at_target, binary_entropy(y), atol=1e-9)
        for delta in (-0.005, 0.005, 0.1):
            p = np.clip(y + delta, 0.0, 1.0)
            moved = bce(Tensor(p), Tensor(y), reduction="none").data
            assert np.all(moved >= at_target - 1e-12)

    def test_range_checked(self):
        """Test probabilities outside [0, 1] raise ShapeError."""
        with pytest.raises(ShapeError):
            bce(Tensor([1.2]), Tensor([1.0]))
        with pytest.raises(ShapeError):
            bce(Tensor([0.5]), Tensor([-0.1]))

    def test_clamp_bounds_loss(self):
        """Test a confident wrong prediction is finite."""
        loss = bce(Tensor([0.0]), Tensor([1.0])).item()
        assert loss == pytest.approx(-math.log(PROB_EPS), rel=1e-6)

    def test_gradient(self, rng):
        """Test BCE gradients for predictions and soft targets."""
        p = rng.uniform(0.1, 0.9, size=(3, 4, 5))
        y = rng.uniform(0.05, 0.95, size=(3, 4, 5))
        assert grad_check(lambda a, b: bce(a, b, reduction="sum"), [p, y]) < 1e-4


class TestKlDivergence:
    """Test the KL divergence helpers."""

    def test_self_divergence_is_zero(self, rng):
        """Test KL(P, P) = 0 on 1000 random distributions."""
        p = _distributions(rng)
        out = kl_div(Tensor(p), Tensor(p), reduction="none").data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_non_negative(self, rng):
        """Test KL(P, Q) >= 0 on 1000 random pairs."""
        p, q = _distributions(rng), _distributions(rng)
        out = kl_div(Tensor(p), Tensor(q), reduction="none").data
        assert np.all(out >= -1e-12)

    def test_log_input_scalar_case(self):
        """Test the two-class case KL([2/3, 1/3] || [1/2, 1/2])."""
        log_q = log_softmax(Tensor([0.0, 0.0]))
        p = softmax(Tensor([math.log(2.0), 0.0]))
        expected = (2.0 / 3.0) * math.log(4.0 / 3.0) + (1.0 / 3.0) * math.log(2.0 / 3.0)
        assert kl_div_log_input(log_q, p).item() == pytest.approx(expected, abs=1e-12)

    def test_zero_probability_terms_vanish(self):
        """Test p = 0 entries contribute nothing."""
        log_q = Tensor(np.log([0.5, 0.25, 0.25]))
        p = Tensor([1.0, 0.0, 0.0])
        assert kl_div_log_input(log_q, p).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_small_and_zero_target_probabilities_unclamped(self):
        """Test P entries below the Q clamp keep their exact value and zeros contribute nothing."""
        p = np.array([1.0 - 1e-9, 1e-9, 0.0])
        q = np.array([0.5, 0.3, 0.2])
        mask = p > 0
        expected = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
        assert kl_div(Tensor(p), Tensor(q)).item() == pytest.approx(expected, rel=1e-12, abs=1e-15)

    def test_unnormalized_rejected(self):
        """Test distributions that do not sum to one are rejected."""
        with pytest.raises(ShapeError):
            kl_div(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))
        with pytest.raises(ShapeError):
            kl_div(Tensor([0.5, 0.5]), Tensor([0.9, 0.2]))

    def test_gradient_through_student_logits(self, rng):
        """Test the gradient of KL(log_softmax(s), softmax(t)) with respect to s."""
        t = softmax(Tensor(rng.normal(size=(4, 3))), axis=1)
        s = rng.normal(size=(4, 3))
        assert grad_check(lambda x: kl_div_log_input(ops.LogSoftmax.apply(x, axis=1), t, axis=1), [s]) < 1e-4
