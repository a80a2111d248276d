"""Reverse-mode differentiation core: Tensor, Function, backward and gradient checking.

A ``Tensor`` wraps a NumPy array. Operations are ``Function`` subclasses (see ``ops.py``) that
record their inputs when gradients are required, so ``backward`` can walk the graph in reverse
topological order. Tensors are treated as immutable once created; only ``grad`` changes, and
only during a backward pass. A graph belongs to the thread that built it.
"""

import contextlib
import logging
import threading
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from sonar_kd.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]
Operand = Union["Tensor", float, int]

# Finite-difference step used by grad_check.
GRAD_CHECK_EPS = 1e-4

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Return whether operations on this thread currently record a graph."""
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which maps the gradient of
    the output to one gradient (or ``None``) per input, in input order.
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs: Tuple["Tensor", ...] = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and wrap the result, recording the graph if needed."""
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _creator=func if requires_grad else None)


class Tensor:
    """Dense n-dimensional real array with an optional gradient."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
        _creator: Optional[Function] = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor", {"shape": list(self.shape)})
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the operations themselves live in ops.py

    def __add__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        from sonar_kd.core import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from sonar_kd.core import ops

        return ops.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from sonar_kd.core import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from sonar_kd.core import ops

        return ops.getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from sonar_kd.core import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from sonar_kd.core import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        from sonar_kd.core import ops

        return ops.reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        from sonar_kd.core import ops

        return ops.permute(self, axes)

    # Differentiation

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss", {"shape": list(self.shape)})
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            creator = node._creator
            if creator is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = creator.backward(grad)
            for parent, parent_grad in zip(creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.data.shape:
                    raise ShapeError(
                        f"{type(creator).__name__} produced a gradient of the wrong shape",
                        {"expected": list(parent.shape), "got": list(parent_grad.shape)},
                    )
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order of the requires-grad subgraph below ``root``; raises on cycles."""
    order: List[Tensor] = []
    state: Dict[int, int] = {}  # 1 = on the current path, 2 = finished
    stack: List[Tuple[Tensor, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in the computation graph")
        state[key] = 1
        stack.append((node, True))
        if node._creator is not None:
            for parent in node._creator.inputs:
                if parent.requires_grad and state.get(id(parent)) != 2:
                    stack.append((parent, False))
    return order


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Union[Tensor, np.ndarray]],
    eps: float = GRAD_CHECK_EPS,
) -> float:
    """Compare autodiff gradients of scalar ``f`` against central finite differences.

    All inputs are promoted to float64 leaves. The per-element error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``: absolute for small gradients,
    relative for large ones. Returns the maximum over every element of every input.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    out.backward()

    def evaluate() -> float:
        with no_grad():
            return f(*(Tensor(a) for a in arrays)).item()

    worst = 0.0
    for array, leaf in zip(arrays, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(array)
        numeric = np.zeros_like(array)
        flat = array.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus = evaluate()
            flat[k] = original - eps
            minus = evaluate()
            flat[k] = original
            numeric_flat[k] = (plus - minus) / (2.0 * eps)
        if array.size == 0:
            continue
        scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))

    logger.debug("grad_check over %d inputs: max error %.3e", len(arrays), worst)
    return worst
