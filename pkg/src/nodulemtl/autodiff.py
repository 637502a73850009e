"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding a closure that
maps the output gradient to input gradients. Node ids come from a global
counter, so the inputs of node ``k`` always carry ids below ``k`` and sorting
by descending id is an exact reverse topological order.

Two precisions are supported: float32 for training and float64 for gradient
verification (see :func:`precision`).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "ShapeError",
    "GraphError",
    "FiniteDiffReport",
    "forward",
    "backward",
    "finite_diff_check",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "no_grad",
    "make_op",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class GraphError(RuntimeError):
    """Raised on misuse of a graph (e.g. backward before forward)."""


_state = threading.local()
_ids = itertools.count()


def _get(attr, default):
    return getattr(_state, attr, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def precision(bits: int):
    """Temporarily switch the default dtype to 32- or 64-bit reals."""
    previous = get_default_dtype()
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled() -> bool:
    return _get("grad", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class Node:
    """One recorded operation: id, op name, inputs and the backward rule."""

    __slots__ = ("id", "op", "inputs", "backward_fn", "out_shape")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, out_shape: tuple):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_shape = out_shape

    def __repr__(self) -> str:
        return f"Node({self.op}#{self.id}, out={self.out_shape})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=None) -> None:
        run_backward([self], None if seed is None else [seed])


# -- recording ---------------------------------------------------------------

def _tape_stack() -> list:
    stack = _get("tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def make_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record the op if any input needs grad.

    ``backward_fn(grad_out)`` must return one array (or ``None``) per input.
    """
    result = Tensor._wrap(out)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op, tuple(inputs), backward_fn, result.shape)
        result.node = node
        result.requires_grad = True
        tapes = _tape_stack()
        if tapes:
            tapes[-1].append(node)
    return result


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _collect(outputs: Iterable[Tensor]) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [t.node for t in outputs if t.node is not None]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(t.node for t in node.inputs if t.node is not None and t.node.id not in seen)
    return [seen[k] for k in sorted(seen, reverse=True)]


def run_backward(outputs: Sequence[Tensor], seeds: Sequence | None = None) -> list[Tensor]:
    """Backpropagate from ``outputs``; leaf gradients accumulate into ``.grad``.

    Returns the leaves that received a gradient.
    """
    if seeds is None:
        seeds = [np.ones_like(t.data) for t in outputs]
    pending: dict[int, np.ndarray] = {}
    touched: dict[int, Tensor] = {}

    def deliver(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
        if t.node is None:
            t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            touched[id(t)] = t
        else:
            key = t.node.id
            pending[key] = g if key not in pending else pending[key] + g

    for t, s in zip(outputs, seeds):
        s = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=t.dtype)
        if s.shape != t.shape:
            raise ShapeError(f"seed shape {s.shape} does not match output shape {t.shape}")
        deliver(t, s)

    for node in _collect(outputs):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is not None:
                deliver(t, gi)
    return list(touched.values())


# -- graphs ------------------------------------------------------------------

class Graph:
    """A re-runnable computation: ``fn(**inputs)`` returns a tensor or a dict.

    ``forward`` records the operation nodes in execution (topological) order;
    ``backward`` walks them in exact reverse order.
    """

    def __init__(self, fn: Callable[..., Tensor | dict], name: str = "graph"):
        self.fn = fn
        self.name = name
        self.nodes: list[Node] = []
        self.inputs: dict[str, Tensor] | None = None
        self.outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        tapes = _tape_stack()
        tape: list[Node] = []
        tapes.append(tape)
        try:
            result = self.fn(**inputs)
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: {exc}") from None
        finally:
            tapes.pop()
        if isinstance(result, Tensor):
            result = {"out": result}
        self.nodes = tape
        self.inputs = dict(inputs)
        self.outputs = dict(result)
        return self.outputs

    def backward(self, seed: dict | None = None) -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphError(f"{self.name}: backward called before forward")
        names = list(self.outputs)
        outs = [self.outputs[k] for k in names]
        seeds = None if seed is None else [seed[k] for k in names]
        run_backward(outs, seeds)
        return {k: t.grad for k, t in self.inputs.items() if t.requires_grad and t.grad is not None}


def forward(graph: Graph, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, seed: dict | None = None) -> dict[str, np.ndarray]:
    return graph.backward(seed)


@dataclass
class FiniteDiffReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    excluded: np.ndarray  # True where one-sided slopes disagree (kink / tie)
    tolerance: float
    max_rel_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        kept = self.rel_error[~self.excluded]
        self.max_rel_error = float(kept.max()) if kept.size else 0.0
        self.passed = self.max_rel_error < self.tolerance

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"{state}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}), "
                f"{self.n_excluded} subgradient point(s) excluded of {self.rel_error.size}")


def finite_diff_check(graph: Graph, inputs: dict[str, Tensor], wrt: str,
                      step: float = 1e-5, tolerance: float = 1e-4,
                      kink_tol: float = 1e-3, floor: float = 1e-6) -> FiniteDiffReport:
    """Compare the analytic gradient of a scalar graph with central differences.

    Elements whose forward and backward one-sided slopes disagree by more than
    ``kink_tol`` sit on a non-differentiable point (a max-pool tie, say) and
    are excluded rather than failed.
    """
    x = inputs[wrt]
    if x.dtype != np.float64:
        raise GraphError("finite_diff_check requires 64-bit tensors")

    def evaluate() -> float:
        outs = graph.forward(inputs)
        if len(outs) != 1:
            raise GraphError(f"{graph.name}: expected one output, got {list(outs)}")
        (out,) = outs.values()
        if out.size != 1:
            raise GraphError(f"{graph.name}: output is not scalar (shape {out.shape})")
        return out

    for t in inputs.values():
        t.zero_grad()
    evaluate()
    graph.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    excluded = np.zeros(flat.size, dtype=bool)
    with no_grad():
        f0 = evaluate().item()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate().item()
            flat[i] = orig - step
            fm = evaluate().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
            s_fwd, s_bwd = (fp - f0) / step, (f0 - fm) / step
            excluded[i] = abs(s_fwd - s_bwd) > kink_tol * max(1.0, abs(s_fwd), abs(s_bwd))
    numeric = numeric.reshape(x.shape)
    excluded = excluded.reshape(x.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return FiniteDiffReport(analytic, numeric, rel, excluded, tolerance)


# -- elementary ops ------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} vs {b.shape}") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return make_op("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return make_op("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _broadcast_shape("mul", a, b)
    return make_op("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_op("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_op("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_op("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return make_op("square", (a,), a.data * a.data, lambda g: (2 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        if axis is None:
            return (np.full(a.shape, g.reshape(-1)[0], dtype=g.dtype),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_op("sum", (a,), out, bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shape {a.shape} vs {tuple(shape)}") from None
    return make_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    return make_op("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return make_op("transpose", (a,), a.data.T, lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))
    return make_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bw)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: shapes {a.shape} vs {index.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)
    return make_op("pick", (a,), a.data[rows, index], bw)


def identity(a: Tensor) -> Tensor:
    return make_op("identity", (a,), a.data.copy(), lambda g: (g,))
