#!/usr/bin/env python3
"""
WAE-RNF - Gradient Core
Minimal dense-tensor reverse-mode differentiation engine.

Every value that takes part in training (flow parameters, LSTM weights, latent
codes) is a ``Tensor`` holding a float64 numpy array. Operations record a
``Node`` on the output tensor when any input requires a gradient; ``backward``
traces the graph from a scalar root and applies each node's vector-Jacobian
product once, in reverse topological order.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from rnf_utils import ContractError, DimensionError, DomainError, NonFiniteError

logger = logging.getLogger('grad_core')

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording for the enclosed block (sampling, evaluation)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@dataclass
class Node:
    """One recorded operation: its kind, its input tensors and its VJP."""
    kind: str
    inputs: Tuple['Tensor', ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense float64 array participating in a reverse-mode computation graph."""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_node')

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ''):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"Tensor '{name or '?'}' would contain NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other): return forward_op('add', [self, as_tensor(other)])
    def __radd__(self, other): return forward_op('add', [as_tensor(other), self])
    def __sub__(self, other): return forward_op('sub', [self, as_tensor(other)])
    def __rsub__(self, other): return forward_op('sub', [as_tensor(other), self])
    def __mul__(self, other): return forward_op('mul', [self, as_tensor(other)])
    def __rmul__(self, other): return forward_op('mul', [as_tensor(other), self])
    def __truediv__(self, other): return forward_op('div', [self, as_tensor(other)])
    def __rtruediv__(self, other): return forward_op('div', [as_tensor(other), self])
    def __neg__(self): return forward_op('neg', [self])
    def __matmul__(self, other): return forward_op('matmul', [self, as_tensor(other)])
    def __getitem__(self, key): return forward_op('slice', [self], key=key)

    def tanh(self): return forward_op('tanh', [self])
    def sigmoid(self): return forward_op('sigmoid', [self])
    def exp(self): return forward_op('exp', [self])
    def log(self): return forward_op('log', [self])
    def softplus(self): return forward_op('softplus', [self])
    def square(self): return forward_op('square', [self])
    def sqrt(self): return forward_op('sqrt', [self])
    def abs(self): return forward_op('abs', [self])

    def sum(self, axis=None, keepdims=False):
        return forward_op('sum', [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_op('mean', [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op('reshape', [self], shape=shape)

    def transpose(self, axes=None):
        return forward_op('transpose', [self], axes=axes)

    @property
    def T(self):
        return self.transpose()


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: str = '') -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Graph construction helpers
# ---------------------------------------------------------------------------

def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: result contains NaN/Inf")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = ''
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(kind, tuple(inputs), vjp)
    return out


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Op kinds
# ---------------------------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('add', a, b)
    return _emit('add', a.data + b.data, (a, b), lambda g: (g, g))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('sub', a, b)
    return _emit('sub', a.data - b.data, (a, b), lambda g: (g, -g))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('mul', a, b)
    ad, bd = a.data, b.data
    return _emit('mul', ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('div', a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError(f"div: zero in denominator of shape {b.shape}")
    return _emit('div', ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def _neg(a: Tensor) -> Tensor:
    return _emit('neg', -a.data, (a,), lambda g: (-g,))


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    out2 = a2 @ b2
    out_shape = out2.shape
    if a.ndim == 1:
        out_shape = out_shape[1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]

    def vjp(g):
        g2 = g.reshape(out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _emit('matmul', out2.reshape(out_shape), (a, b), vjp)


def _tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit('tanh', y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)
    return _emit('sigmoid', y, (a,), lambda g: (g * y * (1.0 - y),))


def _exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit('exp', y, (a,), lambda g: (g * y,))


def _log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.min():.3g}) of shape {a.shape}")
    return _emit('log', np.log(x), (a,), lambda g: (g / x,))


def _softplus(a: Tensor) -> Tensor:
    x = a.data
    return _emit('softplus', np.logaddexp(0.0, x), (a,), lambda g: (g * special.expit(x),))


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit('sum', np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _emit('mean', np.mean(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def _square(a: Tensor) -> Tensor:
    x = a.data
    return _emit('square', x * x, (a,), lambda g: (2.0 * x * g,))


def _sqrt(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError(f"sqrt: non-positive input (min {x.min():.3g}) of shape {a.shape}")
    y = np.sqrt(x)
    return _emit('sqrt', y, (a,), lambda g: (g / (2.0 * y),))


def _abs(a: Tensor) -> Tensor:
    x = a.data
    return _emit('abs', np.abs(x), (a,), lambda g: (g * np.sign(x),))


def _concat(*tensors: Tensor, axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit('concat', data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def _slice(a: Tensor, key=None) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    try:
        data = a.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {key!r} invalid for shape {shape}") from exc
    return _emit('slice', np.array(data, dtype=np.float64), (a,), vjp)


def _embedding_lookup(table: Tensor, ids=None) -> Tensor:
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding-lookup: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit('embedding-lookup', table.data[ids], (table,), vjp)


def _log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = special.log_softmax(a.data, axis=axis)

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _emit('log-softmax', y, (a,), vjp)


def _dropout_mask_apply(a: Tensor, mask: Tensor) -> Tensor:
    if mask.requires_grad:
        raise ContractError("dropout-mask-apply: mask must be a constant tensor")
    _broadcast_shape('dropout-mask-apply', a, mask)
    m = mask.data
    return _emit('dropout-mask-apply', a.data * m, (a, mask), lambda g: (g * m, None))


def _reshape(a: Tensor, shape=()) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit('reshape', data, (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _emit('transpose', a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _gather(a: Tensor, ids=None) -> Tensor:
    """Pick one entry per row: out[i] = a[i, ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or ids.shape != (a.shape[0],):
        raise DimensionError(f"gather: need 2-D input and one id per row, got {a.shape} / {ids.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, ids] = g
        return (full,)

    return _emit('gather', a.data[rows, ids], (a,), vjp)


_OPS: Dict[str, Callable[..., Tensor]] = {
    'add': _add,
    'sub': _sub,
    'mul': _mul,
    'div': _div,
    'neg': _neg,
    'matmul': _matmul,
    'tanh': _tanh,
    'sigmoid': _sigmoid,
    'exp': _exp,
    'log': _log,
    'softplus': _softplus,
    'sum': _sum,
    'mean': _mean,
    'square': _square,
    'sqrt': _sqrt,
    'abs': _abs,
    'concat': _concat,
    'slice': _slice,
    'embedding-lookup': _embedding_lookup,
    'log-softmax': _log_softmax,
    'dropout-mask-apply': _dropout_mask_apply,
    'reshape': _reshape,
    'transpose': _transpose,
    'gather': _gather,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs``; records a graph node when any input requires grad."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind '{kind}'") from None
    return op(*[as_tensor(t) for t in inputs], **attrs)


# Functional aliases used across the package.

def tanh(x): return forward_op('tanh', [x])
def sigmoid(x): return forward_op('sigmoid', [x])
def exp(x): return forward_op('exp', [x])
def log(x): return forward_op('log', [x])
def softplus(x): return forward_op('softplus', [x])
def concat(tensors, axis=0): return forward_op('concat', list(tensors), axis=axis)
def embedding_lookup(table, ids): return forward_op('embedding-lookup', [table], ids=ids)
def log_softmax(x, axis=-1): return forward_op('log-softmax', [x], axis=axis)
def dropout_apply(x, mask): return forward_op('dropout-mask-apply', [x, mask])
def gather(x, ids): return forward_op('gather', [x], ids=ids)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from a root, in topological order."""
    nodes: List[Tensor]

    def __len__(self) -> int:
        return len(self.nodes)


def trace(root: Tensor) -> Graph:
    """Topologically order every non-leaf tensor the root depends on."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if tensor._node is None:
            continue
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._node.inputs:
            if parent._node is not None and id(parent) not in visited:
                stack.append((parent, False))
    return Graph(order)


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(grad, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + grad


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf that requires it."""
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward: root is not on a recorded graph")

    seed = np.ones(root.shape)
    if root.is_leaf:
        _accumulate_leaf(root, seed)
        return

    graph = trace(root)
    pending: Dict[int, np.ndarray] = {id(root): seed}
    for tensor in reversed(graph.nodes):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        node = tensor._node
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            if parent.is_leaf:
                _accumulate_leaf(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_abs_error: float
    max_rel_error: float
    worst_input: int = -1
    worst_index: int = -1


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
              eps: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7) -> GradCheckResult:
    """
    Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    An element passes when |analytic - numeric| <= atol or the relative error
    |a - n| / max(|a|, |n|) is below rtol.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    passed = True
    max_abs = max_rel = 0.0
    worst = (-1, -1)
    with no_grad():
        for i, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = fn(*inputs).item()
                flat[j] = orig - eps
                f_minus = fn(*inputs).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic[i].reshape(-1)[j]
                abs_err = abs(a - numeric)
                rel_err = abs_err / max(abs(a), abs(numeric), 1e-300)
                if abs_err > atol and rel_err > rtol:
                    passed = False
                if abs_err > max_abs:
                    max_abs, worst = abs_err, (i, j)
                if abs_err > atol:
                    max_rel = max(max_rel, rel_err)
    for t in inputs:
        t.zero_grad()
    return GradCheckResult(passed, max_abs, max_rel, worst[0], worst[1])
