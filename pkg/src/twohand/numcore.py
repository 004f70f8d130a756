"""Dense float64 arrays with reverse-mode differentiation.

Every differentiable value is a :class:`Node`. Operations build a graph of
nodes as they run; :meth:`Node.backward` replays it in reverse creation
order, which is always a valid topological order because a node is created
after all of its inputs.
"""
from __future__ import annotations

import builtins
import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GradCheckAborted, ShapeError

_ids = itertools.count()


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "id")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None) -> None:
        """Propagate gradients from this node to every node that requires them.

        Leaf gradients accumulate across calls (gradient accumulation over a
        mini-batch); interior nodes get a fresh gradient each call.
        """
        if seed is None:
            if self.value.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.value)
        order = _reachable(self)
        grads = {self.id: np.asarray(seed, dtype=np.float64).reshape(self.shape)}
        for node in order:
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Parameter(Node):
    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None


class ParamStore:
    """Ordered registry of uniquely named parameters.

    Frozen parameters take part in forward passes but are skipped by the
    optimizer.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self._params[name] = p
        if frozen:
            self.frozen.add(name)
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for n, p in self._params.items() if n not in self.frozen]

    def size(self) -> int:
        return builtins.sum(p.value.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_arrays(self, arrays) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, a in arrays.items():
            p = self._params[n]
            if p.value.shape != np.shape(a):
                raise ShapeError(f"{n}: stored shape {np.shape(a)} != {p.value.shape}")
            p.value[...] = a


def _reachable(root: Node) -> list[Node]:
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording the graph (values only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(value, parents: Sequence[Node], backward_fn) -> Node:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Node(value)
    return Node(value, requires_grad=True, parents=parents, backward_fn=backward_fn)


def custom_op(value, parents: Sequence, backward_fn) -> Node:
    """A node whose vector-Jacobian product ``backward_fn(g) -> per-parent grads`` is supplied by the caller."""
    return _make(value, [as_node(p) for p in parents], backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    if a.shape == b.shape or not b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), backward)


def transpose(x) -> Node:
    x = as_node(x)
    return _make(x.value.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -------------------------------------------------------------- elementwise

_branch_log: list | None = None
_branch_replay = None


@contextmanager
def record_branches():
    """Collect the branch taken by every piecewise-linear op evaluated inside the block."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


@contextmanager
def replay_branches(patterns: list):
    """Force piecewise-linear ops to take the branches in ``patterns``, in evaluation order.

    With the branches frozen the function is smooth, and it agrees with the
    real one on a neighbourhood of the point where ``patterns`` was recorded.
    """
    global _branch_replay
    prev, _branch_replay = _branch_replay, iter(patterns)
    it = _branch_replay
    try:
        yield
        if next(it, None) is not None:
            raise GradCheckAborted("replayed evaluation used fewer piecewise ops than were recorded")
    finally:
        _branch_replay = prev


def _branch(computed: np.ndarray) -> np.ndarray:
    if _branch_replay is not None:
        forced = next(_branch_replay, None)
        if forced is None or forced.shape != computed.shape:
            raise GradCheckAborted("replayed evaluation does not match the recorded graph")
        return forced
    if _branch_log is not None:
        _branch_log.append(computed)
    return computed


def relu(x) -> Node:
    x = as_node(x)
    mask = _branch(x.value > 0)
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def absolute(x) -> Node:
    x = as_node(x)
    sign = _branch(np.sign(x.value))
    return _make(sign * x.value, (x,), lambda g: (g * sign,))


def square(x) -> Node:
    x = as_node(x)
    v = x.value
    return _make(v * v, (x,), lambda g: (2.0 * g * v,))


def sqrt(x) -> Node:
    x = as_node(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def softmax_rows(x) -> Node:
    x = as_node(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


# --------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    x = as_node(x)
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _reduce(x: Node, reduction: str) -> Node:
    if reduction == "sum":
        return sum(x)
    if reduction == "mean":
        return mean(x)
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l1(a, b, reduction: str = "sum") -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("l1", a, b)
    return _reduce(absolute(sub(a, b)), reduction)


def mse(a, b, reduction: str = "mean") -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("mse", a, b)
    return _reduce(square(sub(a, b)), reduction)


def smooth_l1(a, b, beta: float = 1.0, reduction: str = "mean") -> Node:
    """Huber-style loss: quadratic below ``beta``, linear above."""
    a, b = as_node(a), as_node(b)
    _same_shape("smooth_l1", a, b)
    d = a.value - b.value
    # 0 marks the quadratic zone, +-1 the sign in the linear zones
    branch = _branch(np.where(np.abs(d) < beta, 0.0, np.sign(d)))
    quad = branch == 0
    val = np.where(quad, 0.5 * d * d / beta, branch * d - 0.5 * beta)
    dval = np.where(quad, d / beta, branch)
    elem = _make(val, (a, b), lambda g: (g * dval, -g * dval))
    return _reduce(elem, reduction)


# ------------------------------------------------------------ restructuring

def concat_cols(parts: Sequence) -> Node:
    parts = [as_node(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), parts, backward)


def concat_rows(parts: Sequence) -> Node:
    parts = [as_node(p) for p in parts]
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), parts, backward)


def slice_cols(x, start: int, stop: int) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.value[:, start:stop], (x,), backward)


def slice_rows(x, start: int, stop: int) -> Node:
    x = as_node(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(x.value[start:stop], (x,), backward)


def take_rows(x, index) -> Node:
    """Gather rows by integer index (repeats allowed)."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), backward)


def row_norms(x) -> Node:
    """Exact Euclidean norm of each row as an (m, 1) column.

    The gradient at an all-zero row is taken as zero rather than NaN.
    """
    x = as_node(x)
    out = np.linalg.norm(x.value, axis=1, keepdims=True)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (x,), lambda g: (np.where(out > 0, g / safe, 0.0) * x.value,))


# ---------------------------------------------------------- gradient oracle

def central_difference(f: Callable[[], float], arr: np.ndarray, index, eps: float) -> float:
    old = arr[index]
    arr[index] = old + eps
    fp = f()
    arr[index] = old - eps
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * eps)


def grad_check(
    f: Callable[[], Node],
    params: Mapping[str, Node] | Iterable[Parameter],
    eps: float = 1e-5,
    n_coords: int = 16,
    seed: int = 0,
    floor: float = 1e-6,
    richardson: bool = False,
) -> dict[str, float]:
    """Compare reverse-mode gradients of ``f`` to central differences.

    ``f`` must rebuild the computation from the current parameter values on
    each call and return a scalar node. Up to ``n_coords`` coordinates are
    sampled per parameter (all of them when the parameter is smaller). The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the returned report maps each parameter name to its worst coordinate.

    The perturbed evaluations replay the relu/abs branches of the base point,
    so a step that would cross a kink still measures the derivative there.
    ``richardson=True`` combines steps ``eps`` and ``eps / 2`` into a
    fourth-order central difference.
    """
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {p.name: p for p in params}
    first = f()
    with record_branches() as base:
        second = f()
    if not np.array_equal(first.value, second.value):
        raise GradCheckAborted("objective is not deterministic: two forward passes disagree")
    for p in named.values():
        p.grad = None
    second.backward()

    def frozen() -> float:
        with replay_branches(base), no_grad():
            return f().item()

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in named.items():
        arr = p.value
        analytic = np.zeros_like(arr) if p.grad is None else p.grad
        size = arr.size
        if size <= n_coords:
            flat = np.arange(size)
        else:
            flat = rng.choice(size, size=n_coords, replace=False)
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, arr.shape)
            if richardson:
                half = central_difference(frozen, arr, idx, eps / 2)
                num = (4.0 * half - central_difference(frozen, arr, idx, eps)) / 3.0
            else:
                num = central_difference(frozen, arr, idx, eps)
            a = analytic[idx]
            worst = builtins.max(worst, abs(a - num) / builtins.max(abs(a), abs(num), floor))
        report[name] = worst
    return report
