"""Parameters, modules and the convolutional building blocks shared by the detector and ViT."""

from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor
from sonar_kd.errors import ConfigError, ShapeError

# Default head bias prior: sigmoid(bias) == 0.01 at initialization.
PRIOR_PROB = 0.01
NORM_EPS = 1e-3


class Parameter(Tensor):
    """A trainable leaf tensor. Unlike other tensors its values may be replaced in place."""

    def __init__(self, data: np.ndarray) -> None:
        super().__init__(np.array(data), requires_grad=True)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ShapeError(
                f"cannot assign {values.shape} to a parameter of shape {self.data.shape}",
                {"expected": list(self.data.shape), "got": list(values.shape)},
            )
        self.data = values.astype(self.data.dtype, copy=True)


class Module:
    """Base class: attributes that are Parameters, Modules or lists of them form the tree."""

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{path}.{index}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{index}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(
                    "state dict does not match the model",
                    {"missing": missing[:10], "unexpected": unexpected[:10]},
                )
        for name, param in own.items():
            if name in state:
                param.assign(state[name])


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype: Any) -> np.ndarray:
    return (rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)


def activation(x: Tensor, name: str) -> Tensor:
    if name == "silu":
        return ops.silu(x)
    if name == "lrelu":
        return ops.leaky_relu(x, 0.1)
    if name == "identity":
        return x
    raise ConfigError(f"unknown activation {name!r}", {"activation": name})


class Linear(Module):
    """Affine map ``x @ W + b`` over the last axis; ``W`` has shape ``(in, out)``."""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int, bias: bool = True, dtype: Any = np.float64) -> None:
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNormLayer(Module):
    def __init__(self, features: int, dtype: Any = np.float64, eps: float = 1e-5) -> None:
        self.gamma = Parameter(np.ones(features, dtype=dtype))
        self.beta = Parameter(np.zeros(features, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class FrozenNorm(Module):
    """Per-channel affine normalization with running statistics frozen at mean 0, variance 1.

    It never looks at batch statistics, so single-image inference equals batched inference.
    """

    def __init__(self, channels: int, dtype: Any = np.float64) -> None:
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        inv_std = Tensor(1.0 / np.sqrt(self.running_var + NORM_EPS))
        scale = ops.mul(self.gamma, inv_std)
        shift = ops.sub(self.beta, ops.mul(scale, Tensor(self.running_mean)))
        return ops.channel_affine(x, scale, shift)


class BaseConv(Module):
    """Conv (no bias) -> FrozenNorm -> activation, with same padding."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        act: str = "silu",
        dtype: Any = np.float64,
    ) -> None:
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype))
        self.norm = FrozenNorm(out_channels, dtype)
        self.stride, self.padding, self.act = stride, (kernel - 1) // 2, act

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return activation(self.norm(y), self.act)


class PredConv(Module):
    """1x1 prediction conv with bias, used by the decoupled head outputs."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int, bias_init: float = 0.0, dtype: Any = np.float64) -> None:
        self.weight = Parameter((rng.standard_normal((out_channels, in_channels, 1, 1)) * 0.01).astype(dtype))
        self.bias = Parameter(np.full(out_channels, bias_init, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class Bottleneck(Module):
    def __init__(self, rng: np.random.Generator, channels: int, shortcut: bool, act: str, dtype: Any) -> None:
        self.conv1 = BaseConv(rng, channels, channels, 1, act=act, dtype=dtype)
        self.conv2 = BaseConv(rng, channels, channels, 3, act=act, dtype=dtype)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        return ops.add(y, x) if self.shortcut else y


class CSPLayer(Module):
    """Cross-stage-partial block: one half runs ``n`` bottlenecks, the other is a 1x1 bypass."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        n: int,
        shortcut: bool = True,
        act: str = "silu",
        dtype: Any = np.float64,
    ) -> None:
        hidden = max(1, out_channels // 2)
        self.conv1 = BaseConv(rng, in_channels, hidden, 1, act=act, dtype=dtype)
        self.conv2 = BaseConv(rng, in_channels, hidden, 1, act=act, dtype=dtype)
        self.blocks = [Bottleneck(rng, hidden, shortcut, act, dtype) for _ in range(n)]
        self.conv3 = BaseConv(rng, 2 * hidden, out_channels, 1, act=act, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        main = self.conv1(x)
        for block in self.blocks:
            main = block(main)
        return self.conv3(ops.concat([main, self.conv2(x)], axis=1))


class SPPBottleneck(Module):
    """Spatial pyramid pooling: parallel stride-1 max pools concatenated with the input."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_sizes: Sequence[int] = (5, 9, 13),
        act: str = "silu",
        dtype: Any = np.float64,
    ) -> None:
        hidden = max(1, in_channels // 2)
        self.conv1 = BaseConv(rng, in_channels, hidden, 1, act=act, dtype=dtype)
        self.kernel_sizes = tuple(kernel_sizes)
        self.conv2 = BaseConv(rng, hidden * (len(self.kernel_sizes) + 1), out_channels, 1, act=act, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv1(x)
        pooled = [x] + [ops.max_pool2d(x, k) for k in self.kernel_sizes]
        return self.conv2(ops.concat(pooled, axis=1))
