"""Dense tensors and a minimal reverse-mode autodiff graph.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation in this
module returns a new tensor that remembers its parents together with a closure
mapping the output gradient to the parent gradients.  :func:`backward` walks the
graph in reverse topological order and accumulates gradients into the leaves.

There is no implicit broadcasting: binary operations require identical extents,
and callers use :func:`broadcast_to` / :func:`reshape` explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float64


class Tensor:
    """An n-dimensional real array that can take part in an autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: str = "", _parents: tuple = (), _backward=None,
                 _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward = _backward

    # --- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    dims = shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor with {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        return backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def make_node(value: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              op: str) -> Tensor:
    """Wrap an op result; the graph is only recorded if some parent needs grads.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    dtype = parents[0].dtype if parents else None
    out = Tensor(value, dtype=dtype, _op=op)
    if needs:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {a.shape} and {b.shape} differ")


# --- matrix product --------------------------------------------------------

def matmul_ascending(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last two axes, accumulating the inner index in order.

    Each output entry is built as ``((0 + a0*b0) + a1*b1) + ...`` which is
    exactly what the textbook triple loop does, so results are bit-identical
    to it and independent of the BLAS build.
    """
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    dtype = np.result_type(a, b)
    aT = np.ascontiguousarray(np.swapaxes(a, -1, -2), dtype=dtype)
    bc = np.ascontiguousarray(b, dtype=dtype)
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=dtype)
    tmp = np.empty_like(out)
    for k in range(a.shape[-1]):
        np.multiply(aT[..., k, :, None], bc[..., k, None, :], out=tmp)
        out += tmp
    return out


def _t(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    """Matrix product over the last two axes (leading batch axes must match).

    With ``transpose_a`` the first operand is ``L x M`` and the result is
    ``A^T B``; with ``transpose_b`` the result is ``A B^T``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have rank >= 2")
    A = _t(a.data) if transpose_a else a.data
    B = _t(b.data) if transpose_b else b.data
    out = matmul_ascending(A, B)

    def backward_fn(g):
        gA = matmul_ascending(g, _t(B))
        gB = matmul_ascending(_t(A), g)
        return (_t(gA) if transpose_a else gA, _t(gB) if transpose_b else gB)

    return make_node(out, (a, b), backward_fn, "matmul")


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "mul")
    A, B = a.data, b.data
    return make_node(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "div")
    A, B = a.data, b.data
    return make_node(A / B, (a, b), lambda g: (g / B, -g * A / (B * B)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_node(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_node(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for nonnegative ``a``; the derivative at 0 is taken as 0 when p < 1."""
    x = a.data
    y = np.power(x, p)

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x, p - 1.0)
        d = np.where(x > 0, d, 0.0 if p < 1 else (1.0 if p == 1 else 0.0))
        return (g * d,)

    return make_node(y, (a,), backward_fn, "power")


def elementwise(op: str, *inputs: Tensor, c: float = 1.0) -> Tensor:
    """Dispatch by name to add/sub/mul/relu/scale."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu}
    if op == "scale":
        return scale(inputs[0], c)
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


# --- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; extents of size 1 (or missing leading axes) are repeated."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}") from exc
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def backward_fn(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

    return make_node(out, (a,), backward_fn, "broadcast")


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape
    out = a.data[index]

    def backward_fn(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out), (a,), backward_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible dims {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                     backward_fn, "concat")


# --- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce: axis {ax} invalid for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(a: Tensor, axis=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (an int, a tuple, or None for all axes)."""
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1

    if mode == "sum":
        out = x.sum(axis=axes, keepdims=True)

        def backward_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)
    elif mode == "mean":
        out = x.sum(axis=axes, keepdims=True) / count

        def backward_fn(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)
    elif mode == "max":
        out = x.max(axis=axes, keepdims=True)

        def backward_fn(g):
            # route the gradient to the first maximal entry only
            moved = np.moveaxis(x, axes, range(-len(axes), 0))
            flat = moved.reshape(moved.shape[:moved.ndim - len(axes)] + (-1,))
            first = flat.argmax(axis=-1)
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
            mask = np.moveaxis(mask.reshape(moved.shape), range(-len(axes), 0), axes)
            return (mask * np.broadcast_to(g.reshape(kept_shape), x.shape),)
    else:
        raise ContractError(f"unknown reduce mode {mode!r}")

    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(x.shape) if i not in axes))
    return make_node(out, (a,), backward_fn, f"reduce_{mode}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (a,), backward_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (a,), backward_fn, "log_softmax")


# --- backward pass ---------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Optional[Iterable[Tensor]] = None):
    """Back-propagate from a scalar ``root``.

    Gradients are accumulated into ``.grad`` of every reachable leaf that
    requires grad.  If ``params`` is given, their gradients are also returned
    as a list, with zeros for parameters that the root does not depend on.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got dims {root.shape}")
    params = list(params) if params is not None else None
    if root.requires_grad:
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = pg.reshape(parent.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad(f: Callable[..., Tensor], *xs: np.ndarray):
    """Gradient of scalar ``f`` at numpy points ``xs`` (fresh leaves each call)."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in xs]
    out = f(*leaves)
    return out.item(), backward(out, leaves)


# --- verification harness --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    skipped: bool = False
    note: str = ""
    analytic: Optional[np.ndarray] = None
    numeric: Optional[np.ndarray] = None


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max-abs values (0 if both vanish)."""
    scale_ = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale_)


def central_differences(f: Callable[[Tensor], Tensor], x0: np.ndarray,
                        step: float = 1e-5) -> np.ndarray:
    x = np.array(x0, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x)).item()
        flat[i] = orig - step
        fm = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x0, step: float = 1e-5,
                      tolerance: float = 1e-5,
                      nonsmooth: Optional[Callable[[np.ndarray], bool]] = None
                      ) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x0`` with central differences.

    ``nonsmooth`` flags points too close to a kink; such points are skipped
    rather than reported as failures.
    """
    x0 = np.array(x0, dtype=np.float64)
    if nonsmooth is not None and nonsmooth(x0):
        return GradCheckReport(0.0, True, skipped=True, note="non-smooth point skipped")
    leaf = Tensor(x0.copy(), requires_grad=True)
    (analytic,) = backward(f(leaf), [leaf])
    numeric = central_differences(f, x0, step)
    err = rel_error(analytic, numeric)
    return GradCheckReport(err, err <= tolerance, analytic=analytic, numeric=numeric)


# --- optimization ----------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float, velocity: Sequence[np.ndarray]):
    """One momentum step: ``v <- m v - lr g``, ``p <- p + v``.  Returns new (params, velocity)."""
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        p, g, v = np.asarray(p), np.asarray(g), np.asarray(v)
        if not p.shape == g.shape == v.shape:
            raise ShapeError(f"sgd_step: dims {p.shape}, {g.shape}, {v.shape} differ")
        v = momentum * v - lr * g
        new_v.append(v)
        new_p.append(p + v)
    return new_p, new_v


class SGD:
    """Momentum SGD over a list of leaf tensors, updating them in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_p, self.velocity = sgd_step([p.data for p in self.params], grads, self.lr,
                                        self.momentum, self.velocity)
        for p, v in zip(self.params, new_p):
            p.data = v.astype(p.dtype, copy=False)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator: same seed, same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))
