"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op builds its output eagerly and, when any input requires grad, records
a backward closure on the output. ``Tensor.backward`` walks the recorded graph
in reverse topological order, visiting each node once.
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = graph_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad (repeated calls accumulate)
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(shape):
    raise ContractError(f"item() on non-scalar tensor of shape {shape}")


def graph_order(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded graph ending at ``root``."""
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result and, if needed, attach its backward rule.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting ------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    """Allow equal shapes, scalars, or one shape fitting the other's trailing dims (1s stretch)."""
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return np.broadcast_shapes(sa, sb)

    def fits(small, big):
        if len(small) > len(big):
            return False
        tail = big[len(big) - len(small):]
        return all(s == t or s == 1 for s, t in zip(small, tail))

    if fits(sb, sa):
        return sa
    if fits(sa, sb):
        return sb
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return make_op(np.where(pick_a, ad, bd), (a, b),
                   lambda g: (unbroadcast(g * pick_a, ad.shape), unbroadcast(g * ~pick_a, bd.shape)))


# -- elementwise unary ---------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log() requires strictly positive input")
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def arcsin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(np.abs(x) > 1):
        raise DomainError("arcsin() input outside [-1, 1]")

    def back(g):
        with np.errstate(divide="ignore"):
            return (g / np.sqrt(1.0 - x * x),)

    return make_op(np.arcsin(x), (a,), back)


def arccos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(np.abs(x) > 1):
        raise DomainError("arccos() input outside [-1, 1]")

    def back(g):
        with np.errstate(divide="ignore"):
            return (-g / np.sqrt(1.0 - x * x),)

    return make_op(np.arccos(x), (a,), back)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def power(a, p) -> Tensor:
    """``a ** p`` for a constant real exponent ``p``."""
    a = as_tensor(a)
    p = float(p)
    x = a.data
    return make_op(x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "cos": cos,
    "sin": sin,
    "arcsin": arcsin,
    "power": power,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# -- linear algebra and reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take_along_rows(a, idx: np.ndarray) -> Tensor:
    """Pick ``a[i, idx[i]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return make_op(a.data[rows, idx], (a,), back)


def index(a, key) -> Tensor:
    """Basic slicing / integer indexing with scatter-add backward."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_op(np.array(a.data[key]), (a,), back)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Row-max-shifted log-sum-exp along ``axis`` (keeps dims)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    e = np.exp(shifted)
    s = e.sum(axis=axis, keepdims=True)
    soft = e / s
    return make_op(np.log(s) + m, (a,), lambda g: (g * soft,))


def log_softmax(a, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# -- gradient checking -------------------------------------------------------

def gradient_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad.reshape(-1)
    numeric = np.empty_like(analytic)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals, pts = [], []
        for sign in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sign * eps
            pts.append(xp[i])
            with no_grad():
                v = f(Tensor(xp.reshape(x0.shape))).item()
            if not np.isfinite(v):
                raise EvaluationError(f"f is not finite at coordinate {i} offset {sign * eps}")
            vals.append(v)
        # divide by the step actually taken; x +/- eps is itself rounded
        numeric[i] = (vals[0] - vals[1]) / (pts[0] - pts[1])
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# -- serialization -------------------------------------------------------------

def serialize(t) -> bytes:
    """Little-endian: u32 rank, u32 dims[rank], f64 data[]."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    if not arr.flags.c_contiguous:  # ascontiguousarray would turn 0-d into shape (1,)
        arr = arr.copy()
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def deserialize(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one tensor at ``offset``; returns (array, next offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(DTYPE).reshape(dims)
    return arr, offset + 8 * n


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
