"""Dense tensor with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive records
its parents and a closure mapping the output adjoint to parent adjoints.
:class:`Tape` linearises the graph reachable from a scalar loss into
topological order and replays the adjoints in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from mtalab.errors import NumericError, ShapeError

_PRECISIONS = {"float32": np.float32, "float64": np.float64, "32": np.float32, "64": np.float64}

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def set_precision(precision: str) -> None:
    """Set the dtype used for every tensor created afterwards in this thread."""
    try:
        _state.dtype = _PRECISIONS[str(precision)]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; use float32 or float64") from None


def get_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.size == 0:
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def check_finite(self, allow_neg_inf: bool = False) -> None:
        """Raise NumericError on NaN or +-inf. ``allow_neg_inf`` tolerates masked -inf."""
        d = self.data
        if np.isnan(d).any():
            raise NumericError(f"NaN in tensor {self.name or self.op} shape {d.shape}")
        bad = np.isposinf(d) if allow_neg_inf else np.isinf(d)
        if bad.any():
            raise NumericError(f"Inf in tensor {self.name or self.op} shape {d.shape}")

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; implementations live in mtalab.core.ops
    def __add__(self, other):
        from mtalab.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from mtalab.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from mtalab.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from mtalab.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from mtalab.core import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from mtalab.core import ops
        return ops.div(other, self)

    def __neg__(self):
        from mtalab.core import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from mtalab.core import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from mtalab.core import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from mtalab.core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from mtalab.core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from mtalab.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from mtalab.core import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a primitive's output; record the edge only if some parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


class Tape:
    """Topologically ordered record of the nodes that feed a scalar loss."""

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes = self._toposort(loss)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def gradients(self) -> dict[int, np.ndarray]:
        """Replay adjoints in reverse order. Returns ``{id(leaf): grad}``; no side effects."""
        adj: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        out: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    out[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"adjoint shape {pg.shape} != input shape {parent.shape} in {node.op}")
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable requires_grad leaf.

    Repeated calls without :meth:`Tensor.zero_grad` add up, as with most frameworks.
    """
    tape = Tape(loss)
    grads = tape.gradients()
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
