"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable operation applied to a tensor that is attached to the
active graph appends one node to a per-thread tape. ``backward`` walks the
tape in decreasing node order, returns the gradient of each leaf that
requires a gradient and then clears the tape.

    >>> w = Tensor([3.0, 4.0], requires_grad=True)
    >>> grads = backward(euclidean_norm(w))
    >>> grads[w]
    array([0.6, 0.8])
"""

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on an argument was violated."""


class DomainError(ValueError):
    """An operation was applied outside its numeric domain."""


class Tensor:
    """Dense float64 array that may participate in gradient computation.

    ``requires_grad`` marks leaves (parameters, inputs under test) whose
    gradients ``backward`` should report. Results of operations carry a
    ``node_id`` into the active graph when any operand was attached.
    """

    __slots__ = ("data", "requires_grad", "name", "node_id", "_generation", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = None
        self._generation = -1

    __hash__ = object.__hash__

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.data!r}{label})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    vjp: object
    parents: tuple
    leaf: object = None


class Graph:
    """Append-only tape of recorded operations.

    Node ids increase monotonically, so a node's parents always have smaller
    ids and reverse tape order is a valid topological order. ``reset``
    bumps the generation; tensors tagged with an older generation are
    treated as detached.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def node_of(self, t):
        if t.node_id is not None and t._generation == self.generation:
            return t.node_id
        if t.requires_grad:
            t.node_id = len(self.nodes)
            t._generation = self.generation
            self.nodes.append(_Node(None, (), t))
            return t.node_id
        return None

    def reset(self):
        self.nodes = []
        self.generation += 1


_local = threading.local()


def active_graph():
    """The calling thread's graph (created on first use)."""
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = Graph()
    return graph


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    graph = active_graph()
    previous = graph.enabled
    graph.enabled = False
    try:
        yield
    finally:
        graph.enabled = previous


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, inputs, vjp):
    graph = active_graph()
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.name = None
    out.node_id = None
    out._generation = -1
    if not graph.enabled:
        return out
    parents = tuple(graph.node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return out
    out.node_id = len(graph.nodes)
    out._generation = graph.generation
    graph.nodes.append(_Node(vjp, parents))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or not sb:
        return sa
    if not sa:
        return sb
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# --------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data
    return _record(
        x * y,
        (a, b),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    x, y = a.data, b.data
    if np.any(y == 0.0):
        raise DomainError("div: division by zero")
    out = x / y
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return _record(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


# --------------------------------------------------------------------------
# unary elementwise


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


# hinge max(0, x); identical to relu including the zero subgradient at 0
max0 = relu


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    safe = np.where(out > 0.0, out, np.inf)
    return _record(out, (a,), lambda g: (0.5 * g / safe,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "square": square,
    "sqrt": sqrt,
    "max0": max0,
    "exp": exp,
}


def elementwise(op, *operands):
    """Dispatch to an elementwise operation by name."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# reductions


def _check_axis(t, axis):
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape
    return _record(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims),),
    )


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    return _record(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims) / count,),
    )


def euclidean_norm(a, axis=None, keepdims=False):
    """L2 norm; the gradient at the origin is taken to be zero."""
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, np.inf)
    out = norm if keepdims else (norm.reshape(()) if axis is None else np.squeeze(norm, axis))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x / safe,)

    return _record(out, (a,), vjp)


REDUCTIONS = {"sum": sum, "mean": mean, "euclidean_norm": euclidean_norm}


def reduce(op, a, axis=None, keepdims=False):
    """Dispatch to a reduction by name."""
    try:
        fn = REDUCTIONS[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(a, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------
# structural


def detach(a):
    """Same values, cut from the graph: ancestors receive no gradient."""
    a = as_tensor(a)
    return Tensor(a.data)


def transpose(a):
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pairwise_distances(x):
    """Matrix of Euclidean distances between the rows of an (N, d) tensor.

    The gradient through a zero distance is zero.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"pairwise_distances: expected (N, d) input, got {x.shape}")
    pts = np.ascontiguousarray(x.data)
    dist = kernels.pairwise_distances(pts)
    return _record(
        dist, (x,), lambda g: (kernels.pairwise_distances_vjp(pts, dist, np.ascontiguousarray(g)),)
    )


# --------------------------------------------------------------------------
# backward


def backward(loss):
    """Gradients of a scalar ``loss`` with respect to every attached leaf.

    Returns a dict keyed by leaf tensor. The active graph is reset
    afterwards, even when no leaf was reachable.
    """
    graph = active_graph()
    loss = as_tensor(loss)
    if loss.size != 1:
        graph.reset()
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    if loss.node_id is None or loss._generation != graph.generation:
        graph.reset()
        return grads
    pending = [None] * (loss.node_id + 1)
    pending[loss.node_id] = np.ones(loss.shape)
    nodes = graph.nodes
    for i in range(loss.node_id, -1, -1):
        g = pending[i]
        if g is None:
            continue
        node = nodes[i]
        if node.leaf is not None:
            grads[node.leaf] = np.array(g, dtype=np.float64)
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            pending[pid] = pg if pending[pid] is None else pending[pid] + pg
        pending[i] = None
    graph.reset()
    return grads


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on ``params`` and ``state``.

    ``grads`` is aligned with ``params``; a ``None`` entry leaves that
    parameter and its moments untouched.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ContractError("adam_step: optimizer state does not match params")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != param shape {p.data.shape}")
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adam over a fixed parameter list, fed with ``backward`` gradient maps."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads):
        grads = [grads.get(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)
