"""Tests for sonar_kd.core.nn."""

import numpy as np
import pytest

from sonar_kd.core.autodiff import Tensor, grad_check
from sonar_kd.core.nn import (
    NORM_EPS,
    BaseConv,
    CSPLayer,
    FrozenNorm,
    Linear,
    Module,
    Parameter,
    PredConv,
    SPPBottleneck,
    activation,
)
from sonar_kd.errors import ConfigError, ShapeError


class _Pair(Module):
    def __init__(self, rng):
        self.first = Linear(rng, 3, 2)
        self.rest = [Linear(rng, 2, 2, bias=False), Parameter(np.ones(4))]
        self.note = "not a parameter"

    def forward(self, x):
        return self.rest[0](self.first(x))


class TestModuleTree:
    """Test parameter discovery and state dicts."""

    def test_named_parameters_paths(self, rng):
        """Test nested modules and lists produce dotted paths."""
        names = [name for name, _ in _Pair(rng).named_parameters()]
        assert names == ["first.weight", "first.bias", "rest.0.weight", "rest.1"]

    def test_num_parameters(self, rng):
        """Test the parameter count."""
        assert _Pair(rng).num_parameters() == 3 * 2 + 2 + 2 * 2 + 4

    def test_state_dict_round_trip(self, rng):
        """Test loading one module's state into another makes them agree."""
        a, b = _Pair(rng), _Pair(rng)
        x = Tensor(rng.normal(size=(5, 3)))
        assert not np.allclose(a(x).data, b(x).data)
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_state_dict_is_a_copy(self, rng):
        """Test mutating a state dict leaves the module alone."""
        module = _Pair(rng)
        state = module.state_dict()
        state["first.bias"][:] = 9.0
        assert np.all(module.first.bias.data == 0.0)

    def test_strict_load_reports_mismatch(self, rng):
        """Test missing and unexpected keys raise ShapeError."""
        module = _Pair(rng)
        state = module.state_dict()
        state.pop("rest.1")
        state["extra"] = np.zeros(1)
        with pytest.raises(ShapeError) as exc_info:
            module.load_state_dict(state)
        assert exc_info.value.context["missing"] == ["rest.1"]
        assert exc_info.value.context["unexpected"] == ["extra"]
        module.load_state_dict(state, strict=False)

    def test_assign_checks_shape(self):
        """Test Parameter.assign rejects a different shape."""
        p = Parameter(np.zeros(3))
        p.assign(np.ones(3, dtype=np.float32))
        assert p.dtype == np.float64
        with pytest.raises(ShapeError):
            p.assign(np.ones(4))

    def test_zero_grad(self, rng):
        """Test zero_grad clears gradients."""
        module = _Pair(rng)
        module(Tensor(rng.normal(size=(2, 3)))).sum().backward()
        assert module.first.weight.grad is not None
        module.zero_grad()
        assert all(p.grad is None for p in module.parameters())


class TestLayers:
    """Test the building blocks."""

    def test_activation_names(self):
        """Test the supported activation names and the error for others."""
        x = Tensor([-1.0, 2.0])
        np.testing.assert_allclose(activation(x, "lrelu").data, [-0.1, 2.0])
        np.testing.assert_array_equal(activation(x, "identity").data, x.data)
        with pytest.raises(ConfigError):
            activation(x, "gelu")

    def test_frozen_norm_is_batch_independent(self, rng):
        """Test one image gives the same output alone and in a batch."""
        norm = FrozenNorm(3)
        batch = rng.normal(size=(4, 3, 2, 2))
        alone = norm(Tensor(batch[:1])).data
        together = norm(Tensor(batch)).data[:1]
        np.testing.assert_array_equal(alone, together)
        np.testing.assert_allclose(alone, batch[:1] / np.sqrt(1.0 + NORM_EPS))

    def test_base_conv_shapes(self, rng):
        """Test same padding and stride-2 downsampling."""
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        assert BaseConv(rng, 3, 5, 3)(x).shape == (2, 5, 8, 8)
        assert BaseConv(rng, 3, 5, 3, stride=2)(x).shape == (2, 5, 4, 4)
        assert BaseConv(rng, 3, 5, 1)(x).shape == (2, 5, 8, 8)

    def test_pred_conv_bias_prior(self, rng):
        """Test the prediction bias starts at the requested value."""
        conv = PredConv(rng, 4, 1, bias_init=-2.0)
        np.testing.assert_array_equal(conv.bias.data, [-2.0])
        assert conv(Tensor(np.zeros((1, 4, 2, 2)))).data.max() == -2.0

    def test_csp_and_spp_shapes(self, rng):
        """Test the CSP and SPP blocks keep the spatial size."""
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        assert CSPLayer(rng, 4, 6, n=2)(x).shape == (1, 6, 4, 4)
        assert SPPBottleneck(rng, 4, 8)(x).shape == (1, 8, 4, 4)

    def test_csp_gradient(self, rng):
        """Test gradients through a CSP block with respect to its input."""
        block = CSPLayer(rng, 2, 2, n=1)
        x = rng.normal(size=(1, 2, 3, 3))
        assert grad_check(lambda t: (block(t) * block(t)).sum(), [x]) < 1e-4

    def test_linear_gradient(self, rng):
        """Test Linear on a 3-d input."""
        layer = Linear(rng, 5, 4)
        x = rng.normal(size=(2, 3, 5))
        assert grad_check(lambda t: (layer(t) * layer(t)).sum(), [x]) < 1e-4
