"""Dense float tensors with reverse-mode automatic differentiation.

Deliberately small engine: arrays are row-major numpy float32 (float64 only
inside the gradient-check shadow mode), every op records a backward closure,
and ``Tensor.backward`` walks the graph in reverse topological order. Any op
that produces NaN/Inf raises immediately instead of letting it propagate.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf values."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


class ShapeError(ValueError):
    pass


_ACTIVE_DTYPE = [np.float32]


def active_dtype():
    return _ACTIVE_DTYPE[-1]


@contextlib.contextmanager
def shadow_precision():
    """Run the enclosed computation in float64 (used by grad_check only)."""
    _ACTIVE_DTYPE.append(np.float64)
    try:
        yield
    finally:
        _ACTIVE_DTYPE.pop()


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(where)


class Tensor:
    """A dense array plus optional gradient accumulator.

    Data is immutable by convention after construction; only ``grad`` is
    mutated (by accumulation during backward). Gradients of repeated
    ``backward`` calls add up, so the gradient of a sum of losses equals the
    sum of per-loss gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=active_dtype())
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._bwd = None
        out._op = "detach"
        return out

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError("gradient shape must match tensor shape")
        upstream = {id(self): grad}
        for node in reversed(_topo_order(self)):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._bwd is None:
                # leaf accumulator; interior nodes only pass gradients along
                node.grad = np.array(g) if node.grad is None else node.grad + g
            if node._bwd is None:
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not _wants_grad(parent):
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wants_grad(node: Tensor) -> bool:
    return node.requires_grad or node._bwd is not None


def _topo_order(root: Tensor):
    seen = set()
    order = []
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents, bwd, op: str) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(_wants_grad(p) for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _make(out, (a,), bwd, "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), bwd, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), bwd, "slice_axis")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * (x + k * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * local,)

    return _make(out, (a,), bwd, "gelu")


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``; no affine."""
    x = a.data
    if x.shape[axis] < 1:
        raise ShapeError("layer_norm axis extent must be >= 1")
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    n = x.shape[axis]

    def bwd(g):
        gy_mean = g.mean(axis=axis, keepdims=True)
        gyy_mean = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gy_mean - y * gyy_mean) * inv,)

    del n
    return _make(y.astype(x.dtype), (a,), bwd, "layer_norm")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max subtraction) along ``axis``."""
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y.astype(x.dtype), (a,), bwd, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is True.

    Blocked positions get exactly zero weight; a row with every position
    blocked produces an all-zero row (the contract for fully-masked queries).
    """
    x = a.data
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.where(mask, x, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    # rows with no unmasked entry: exp(-inf - mx) would be nan; shift them to 0
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(neg - mx), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y.astype(x.dtype), (a,), bwd, "masked_softmax")


def rope_rotate(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2i, 2i+1) of the last axis by per-pair angles."""
    x = a.data
    if x.shape[-1] % 2 != 0:
        raise ShapeError("rope_rotate needs an even trailing dimension")
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(x)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(out, (a,), bwd, "rope_rotate")


def attention_core(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention over the trailing two axes.

    ``mask`` is boolean with True = attend; blocked logits act as -inf and a
    fully-blocked query row outputs zeros.
    """
    d = q.data.shape[-1]
    if k.data.shape[-1] != d or v.data.shape[-2] != k.data.shape[-2]:
        raise ShapeError("attention_core shape mismatch between Q/K/V")
    logits = scale(matmul(q, transpose(k, _swap_last(k.data.ndim))), 1.0 / np.sqrt(d))
    if mask is None:
        weights = softmax(logits, axis=-1)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.data.shape[-2], k.data.shape[-2]):
            raise ShapeError(
                f"attention mask shape {mask.shape} does not match "
                f"{q.data.shape[-2]}x{k.data.shape[-2]} logits"
            )
        weights = masked_softmax(logits, mask, axis=-1)
    return matmul(weights, v)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered name -> parameter tensor map with per-entry trainable flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self._params if self._trainable[n]]

    def set_trainable(self, names) -> None:
        """Make exactly ``names`` trainable and freeze everything else."""
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        for n, t in self._params.items():
            flag = n in names
            self._trainable[n] = flag
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def swap(self, name: str, tensor: Tensor) -> Tensor:
        """Replace one parameter tensor, returning the old one (grad-check plumbing)."""
        old = self._params[name]
        tensor.requires_grad = tensor.requires_grad or self._trainable[name]
        self._params[name] = tensor
        return old

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    failure: str | None = None
    per_input: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def grad_check(f, inputs, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` takes one Tensor per entry of ``inputs`` and returns a scalar
    Tensor. Everything runs in the float64 shadow mode so the difference
    quotient at h~1e-3 is trustworthy at tol 1e-4. Relative error per element
    is |analytic - fd| / max(|analytic|, |fd|, 1).
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    with shadow_precision():
        leaves = [Tensor(x, requires_grad=True) for x in arrays]
        try:
            out = f(*leaves)
            out.backward()
        except NonFiniteError as err:
            return GradCheckReport(np.inf, tol, False, failure=str(err))
        analytic = [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves
        ]

        def evaluate(args):
            return float(f(*[Tensor(a) for a in args]).data)

        max_err = 0.0
        per_input = []
        for i, base in enumerate(arrays):
            fd = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i][idx] += h
                minus[i][idx] -= h
                try:
                    fd[idx] = (evaluate(plus) - evaluate(minus)) / (2 * h)
                except NonFiniteError as err:
                    return GradCheckReport(np.inf, tol, False, failure=str(err))
            denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(fd)), 1.0)
            rel = np.abs(analytic[i] - fd) / denom
            worst = float(rel.max()) if rel.size else 0.0
            per_input.append(worst)
            max_err = max(max_err, worst)
    return GradCheckReport(max_err, tol, max_err <= tol, per_input=per_input)
