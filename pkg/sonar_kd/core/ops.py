"""Differentiable graph operations.

Each operation is a ``Function`` subclass with a backward rule plus a lowercase wrapper that
validates shapes. Broadcasting is limited to leading dimensions: operands have equal shapes,
one of them is 0-d, or the smaller shape equals a trailing suffix of the larger one.
"""

from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sonar_kd.core.autodiff import Function, Operand, Tensor
from sonar_kd.errors import ShapeError

Axis = Optional[Union[int, Sequence[int]]]


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a Python scalar as a constant tensor with the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    small, large = (a, b) if len(a) < len(b) else (b, a)
    if len(small) < len(large) and large[len(large) - len(small) :] == small:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not compatible", {"a": list(a), "b": list(b)})


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor", {"axis": ax, "ndim": ndim})
        normalized.append(ax % ndim if ndim else 0)
    return tuple(sorted(set(normalized)))


# Elementwise arithmetic


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Maximum(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        self.mask = a >= b
        return np.maximum(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(np.where(self.mask, grad, 0.0), self.shapes[0]),
            _unbroadcast(np.where(self.mask, 0.0, grad), self.shapes[1]),
        )


class Minimum(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        self.mask = a <= b
        return np.minimum(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(np.where(self.mask, grad, 0.0), self.shapes[0]),
            _unbroadcast(np.where(self.mask, 0.0, grad), self.shapes[1]),
        )


def _binary(cls: Any, a: Operand, b: Operand, name: str) -> Tensor:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    _check_broadcast(ta.shape, tb.shape, name)
    return cls.apply(ta, tb)


def add(a: Operand, b: Operand) -> Tensor:
    return _binary(Add, a, b, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    return _binary(Sub, a, b, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    return _binary(Mul, a, b, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    return _binary(Div, a, b, "div")


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def maximum(a: Operand, b: Operand) -> Tensor:
    return _binary(Maximum, a, b, "maximum")


def minimum(a: Operand, b: Operand) -> Tensor:
    return _binary(Minimum, a, b, "minimum")


# Unary nonlinearities


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, exact at +/-inf and free of overflow warnings."""
    return np.exp(-np.logaddexp(0.0, -x))


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad / self.x,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = stable_sigmoid(x)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class SiLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.s = stable_sigmoid(x)
        return x * self.s

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        s = self.s
        return (grad * (s + self.x * s * (1.0 - s)),)


class LeakyReLU(Function):
    def forward(self, x: np.ndarray, *, slope: float) -> np.ndarray:
        self.positive = x > 0
        self.slope = slope
        return np.where(self.positive, x, slope * x)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.where(self.positive, grad, self.slope * grad),)


class Clamp(Function):
    def forward(self, x: np.ndarray, *, low: float, high: float) -> np.ndarray:
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.where(self.inside, grad, 0.0),)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def clamp(x: Tensor, low: float = -np.inf, high: float = np.inf) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


# Reductions


class Sum(Function):
    def forward(self, x: np.ndarray, *, axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
        self.shape, self.axes, self.keepdims = x.shape, axes, keepdims
        return np.sum(x, axis=axes, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.array(np.broadcast_to(grad, self.shape)),)


class Mean(Function):
    def forward(self, x: np.ndarray, *, axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
        self.shape, self.axes, self.keepdims = x.shape, axes, keepdims
        self.count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        return np.mean(x, axis=axes, keepdims=keepdims) if axes else x.copy()

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if not self.keepdims and self.axes:
            grad = np.expand_dims(grad, self.axes)
        return (np.array(np.broadcast_to(grad / self.count, self.shape)),)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axes=_normalize_axes(axis, x.ndim), keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axes=_normalize_axes(axis, x.ndim), keepdims=keepdims)


# Shape manipulation


class Reshape(Function):
    def forward(self, x: np.ndarray, *, shape: Tuple[int, ...]) -> np.ndarray:
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, x: np.ndarray, *, axes: Tuple[int, ...]) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.transpose(grad, self.inverse),)


class GetItem(Function):
    def forward(self, x: np.ndarray, *, index: Any) -> np.ndarray:
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def _flatten_dims(dims: Sequence[Any]) -> Tuple[int, ...]:
    if len(dims) == 1 and not isinstance(dims[0], (int, np.integer)):
        dims = dims[0]
    return tuple(int(d) for d in dims)


def reshape(x: Tensor, shape: Sequence[Any]) -> Tensor:
    shape = _flatten_dims(shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (shape.count(-1) == 0 and int(np.prod(shape)) != x.size):
        raise ShapeError(f"cannot reshape {x.shape} to {shape}", {"from": list(x.shape), "to": list(shape)})
    if shape.count(-1) == 1 and (int(np.prod(known)) == 0 or x.size % int(np.prod(known)) != 0):
        raise ShapeError(f"cannot reshape {x.shape} to {shape}", {"from": list(x.shape), "to": list(shape)})
    return Reshape.apply(x, shape=shape)


def permute(x: Tensor, axes: Sequence[Any]) -> Tensor:
    axes = _flatten_dims(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim}-d tensor", {"axes": list(axes)})
    return Permute.apply(x, axes=tuple(a % x.ndim for a in axes))


def getitem(x: Tensor, index: Any) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != reference[d] for d in range(ndim) if d != axis):
            raise ShapeError(
                f"concat: shapes {reference} and {t.shape} differ off axis {axis}",
                {"a": list(reference), "b": list(t.shape), "axis": axis},
            )
    return Concat.apply(*tensors, axis=axis)


# Linear algebra and convolution


class Matmul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = self.a, self.b
        ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, k]`` with ``b[k, n]`` or ``b[..., k, n]`` (same batch dims)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}", {"a": list(a.shape), "b": list(b.shape)})
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}", {"a": list(a.shape), "b": list(b.shape)})
    return Matmul.apply(a, b)


class Conv2d(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, *bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
        kh, kw = w.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias:
            out = out + bias[0].reshape(1, -1, 1, 1)
        self.cols, self.w = cols, w
        self.x_shape, self.padded_shape = x.shape, xp.shape
        self.stride, self.padding, self.has_bias = stride, padding, bool(bias)
        return np.ascontiguousarray(out)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        cols, w, s, p = self.cols, self.w, self.stride, self.padding
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]
        gw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(grad, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, wdt = self.x_shape[2:]
        gx = gxp[:, :, p : p + h, p : p + wdt] if p else gxp
        grads: List[Optional[np.ndarray]] = [np.ascontiguousarray(gx), gw]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N, C, H, W]`` with ``weight[O, C, kh, kw]``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input {x.shape} does not match weight {weight.shape}",
            {"input": list(x.shape), "weight": list(weight.shape)},
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d: bias must have one value per output channel", {"bias": list(bias.shape)})
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0", {"stride": stride, "padding": padding})
    if x.shape[2] + 2 * padding < weight.shape[2] or x.shape[3] + 2 * padding < weight.shape[3]:
        raise ShapeError("conv2d: kernel larger than padded input", {"input": list(x.shape)})
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


class MaxPool2d(Function):
    def forward(self, x: np.ndarray, *, kernel: int) -> np.ndarray:
        pad = kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
        windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
        n, c, h, w = windows.shape[:4]
        flat = windows.reshape(n, c, h, w, kernel * kernel)
        self.arg = flat.argmax(axis=-1)
        self.kernel, self.pad, self.x_shape, self.padded_shape = kernel, pad, x.shape, xp.shape
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        n, c, h, w = grad.shape
        di, dj = np.divmod(self.arg, self.kernel)
        rows = np.arange(h).reshape(1, 1, h, 1) + di
        cols = np.arange(w).reshape(1, 1, 1, w) + dj
        gxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        np.add.at(gxp, (np.arange(n).reshape(n, 1, 1, 1), np.arange(c).reshape(1, c, 1, 1), rows, cols), grad)
        p = self.pad
        return (np.ascontiguousarray(gxp[:, :, p : p + self.x_shape[2], p : p + self.x_shape[3]]),)


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Stride-1 max pooling with same padding (odd kernels only)."""
    if x.ndim != 4 or kernel < 1 or kernel % 2 == 0:
        raise ShapeError("max_pool2d needs a 4-d input and an odd kernel", {"shape": list(x.shape), "kernel": kernel})
    return MaxPool2d.apply(x, kernel=kernel)


class UpsampleNearest(Function):
    def forward(self, x: np.ndarray, *, scale: int) -> np.ndarray:
        self.scale = scale
        return x.repeat(scale, axis=2).repeat(scale, axis=3)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        n, c, h, w = grad.shape
        s = self.scale
        return (grad.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)),)


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    if x.ndim != 4 or scale < 1:
        raise ShapeError("upsample_nearest needs a 4-d input and scale >= 1", {"shape": list(x.shape)})
    return UpsampleNearest.apply(x, scale=scale)


# Normalization


class ChannelAffine(Function):
    def forward(self, x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
        self.x, self.scale = x, scale
        return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            grad * self.scale.reshape(1, -1, 1, 1),
            (grad * self.x).sum(axis=(0, 2, 3)),
            grad.sum(axis=(0, 2, 3)),
        )


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale + shift`` on an ``[N, C, H, W]`` map."""
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("channel_affine: scale/shift must have one value per channel", {"shape": list(x.shape)})
    return ChannelAffine.apply(x, scale, shift)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, *affine: np.ndarray, eps: float) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.affine = affine
        if affine:
            gamma, beta = affine
            return self.xhat * gamma + beta
        return self.xhat

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        xhat = self.xhat
        d = xhat.shape[-1]
        dxhat = grad * self.affine[0] if self.affine else grad
        gx = (
            self.inv_std
            / d
            * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        )
        if not self.affine:
            return (gx,)
        lead = tuple(range(grad.ndim - 1))
        return gx, (grad * xhat).sum(axis=lead), grad.sum(axis=lead)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine ``gamma``/``beta``."""
    if (gamma is None) != (beta is None):
        raise ShapeError("layer_norm needs both gamma and beta or neither")
    if gamma is not None and beta is not None:
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ShapeError("layer_norm: affine parameters must match the feature size", {"shape": list(x.shape)})
        return LayerNorm.apply(x, gamma, beta, eps=eps)
    return LayerNorm.apply(x, eps=eps)


# Normalized exponentials


class Softmax(Function):
    def forward(self, z: np.ndarray, *, axis: int) -> np.ndarray:
        shifted = z - z.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out, self.axis = e / e.sum(axis=axis, keepdims=True), axis
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, z: np.ndarray, *, axis: int) -> np.ndarray:
        shifted = z - z.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.axis = axis
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad - np.exp(self.out) * grad.sum(axis=self.axis, keepdims=True),)
