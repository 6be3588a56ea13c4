"""Dense float64 tensors with a record-on-execute gradient tape.

Every differentiable op appends a node to the thread-local tape when at least
one input tracks gradients. ``backward`` walks the recorded nodes reachable
from the loss in exact reverse execution order and accumulates into the
``grad`` field of leaf tensors. A graph can be differentiated once; a second
call raises :class:`StaleTapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64
# Stand-in for -inf on masked logits: exp() underflows to an exact zero while
# inf - inf never appears.
NEG_INF = -1e30


class TapeError(RuntimeError):
    pass


class StaleTapeError(TapeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.health_check = False
        self.counter = itertools.count()
        self.tapes: list[GradientTape] = []


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def health_checks(enabled: bool = True):
    """Raise NonFiniteError as soon as any op produces NaN or Inf."""
    prev = _state.health_check
    _state.health_check = enabled
    try:
        yield
    finally:
        _state.health_check = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class _Node:
    __slots__ = ("seq", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable) -> None:
        self.seq = next(_state.counter)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class GradientTape:
    """Ordered record of the ops executed while the tape is active.

    >>> with GradientTape() as tape:
    ...     loss = (w * x).sum()
    >>> tape.backward(loss)
    """

    def __init__(self) -> None:
        self.ops: list[_Node] = []
        self._used = False

    def __enter__(self) -> "GradientTape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def backward(self, loss: "Tensor") -> None:
        if self._used:
            raise StaleTapeError("tape already consumed; record a new forward pass")
        self._used = True
        _run_backward(loss, [n for n in reversed(self.ops)])


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _tracks(*ts: Tensor) -> bool:
    return _state.grad_enabled and any(t.requires_grad for t in ts)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _state.health_check and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _tracks(*parents):
        out.requires_grad = True
        node = _Node(op, tuple(parents), backward_fn)
        out._node = node
        for tape in _state.tapes:
            tape.ops.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _collect(loss: Tensor) -> list[_Node]:
    seen: set[int] = set()
    nodes: list[_Node] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n.seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    _run_backward(loss, None)


def _run_backward(loss: Tensor, ordered: list[_Node] | None) -> None:
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tracked tensor")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if loss._node.consumed:
        raise StaleTapeError("graph already differentiated; re-run the forward pass")
    reachable = _collect(loss)
    if ordered is None:
        ordered = reachable
    else:
        keep = {id(n) for n in reachable}
        ordered = [n for n in ordered if id(n) in keep]

    # grads keyed by the id of the tensor that a node produced; the mapping
    # tensor -> node is recovered through the parents lists.
    grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in ordered:
        g = grads.pop(id(node), None)
        if node.consumed:
            raise StaleTapeError("graph already differentiated; re-run the forward pass")
        node.consumed = True
        if g is None:
            node.backward_fn = None
            continue
        parent_grads = node.backward_fn(g)
        node.backward_fn = None
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent._node)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**exponent, "pow", (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0.0), "relu", (a,), lambda g: (g * (ad > 0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, "gelu", (a,), bw)


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), "cos", (a,), lambda g: (-g * np.sin(ad),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), "sin", (a,), lambda g: (g * np.cos(ad),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _make(out, "where", (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)
    return _make(out, "masked_fill", (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), "getitem", (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(ts)))

    return _make(out, "stack", ts, bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; backward gives g @ b^T and a^T @ g."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), bw)


def _einsum_grad(g, out_sub, other_sub, other, target_sub, target_shape):
    # Indices of the target that survive neither in the output nor in the
    # other operand were summed away in the forward; broadcast them back.
    missing = [c for c in target_sub if c not in out_sub and c not in other_sub]
    reduced = "".join(c for c in target_sub if c not in missing)
    if other is None:
        grad = np.einsum(f"{out_sub}->{reduced}", g)
    else:
        grad = np.einsum(f"{out_sub},{other_sub}->{reduced}", g, other, optimize=True)
    if missing:
        expand = [i for i, c in enumerate(target_sub) if c in missing]
        grad = np.expand_dims(grad, expand)
        grad = np.broadcast_to(grad, target_shape)
    return grad


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-output einsum over one or two operands (no repeated indices)."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(ops) or len(ops) not in (1, 2):
        raise ValueError(f"einsum supports one or two operands, got {spec!r}")
    for s in subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within operand in {spec!r}")
    data = np.einsum(spec, *[o.data for o in ops], optimize=len(ops) > 1)

    if len(ops) == 1:
        (a,) = ops
        return _make(
            np.asarray(data, dtype=DTYPE),
            "einsum",
            (a,),
            lambda g: (_einsum_grad(g, out_sub, "", None, subs[0], a.shape),),
        )

    a, b = ops

    def bw(g):
        ga = _einsum_grad(g, out_sub, subs[1], b.data, subs[0], a.shape) if a.requires_grad else None
        gb = _einsum_grad(g, out_sub, subs[0], a.data, subs[1], b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.asarray(data, dtype=DTYPE), "einsum", (a, b), bw)


# ---------------------------------------------------------------------------
# normalizers and losses


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _make(out, "softmax", (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, "log_softmax", (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    mu = mean(x, axis, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis, keepdims=True)
    return xc / sqrt(var + eps)


def mse_loss(pred, target) -> Tensor:
    d = as_tensor(pred) - as_tensor(target)
    return mean(d * d)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Huber-style loss averaged over all entries (quadratic below ``beta``)."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    ad = np.abs(diff)
    small = ad < beta
    val = np.where(small, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    n = diff.size

    def bw(g):
        local = np.where(small, diff / beta, np.sign(diff)) * (g / n)
        return local, -local

    return _make(np.asarray(val.mean(), dtype=DTYPE), "smooth_l1", (pred, target), bw)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the last axis with integer labels."""
    lp = log_softmax(logits, axis=-1)
    labels = np.asarray(labels)
    onehot = np.zeros(lp.shape, dtype=DTYPE)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return -(lp * onehot).sum() * (1.0 / labels.size)


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed) -> np.random.Generator:
    """PCG64 stream; identical seeds give bit-identical draws."""
    return np.random.default_rng(seed)


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=requires_grad)


def uniform(shape, rng: np.random.Generator, low: float, high: float, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
