"""Small dense-tensor reverse-mode autodiff on top of numpy.

Every op builds a node holding references to its parents and a closure that
maps the output gradient to parent gradients. ``backward`` linearises the
graph reachable from a scalar loss into a :class:`Tape` (topological order)
and walks it once in reverse. A graph can be walked only once: the closures
are released afterwards and a second ``backward`` raises.

Storage is float32 by default; reductions accumulate in float64. Any tensor
may also be float64, which is what the finite-difference checks use.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is called on a graph that was already walked."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap python scalars / arrays so they take the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, (a, b), back, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt of negative value")
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def global_mean_pool(h: Tensor) -> Tensor:
    """Column means over the time axis: (..., T, d) -> (..., d)."""
    return mean(h, axis=-2)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), back, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in xs], axis=axis), tuple(xs), back, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like numpy."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(ad, bd), (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b``; a vector ``x`` is treated as a single row."""
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), w, b), (w.shape[-1],))
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# normalisation / softmax
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(xd - m), axis=axis, keepdims=True, dtype=np.float64)).astype(xd.dtype)
    y = xd - lse

    def back(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    mu = np.mean(xd, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((xd - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = ((xd - mu) * inv).astype(xd.dtype)
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalise along ``axis``; a zero vector is an error, not an epsilon."""
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True, dtype=np.float64)).astype(xd.dtype)
    if np.any(norm == 0):
        raise ZeroDivisionError("cannot normalise a zero-norm vector")
    y = xd / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), back, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution / attention
# ---------------------------------------------------------------------------
def conv1d_dilated(x: Tensor, kernels: Tensor, dilation: int = 1, padding: str = "same") -> Tensor:
    """Dilated 1-D cross-correlation with symmetric zero padding.

    ``x`` is (..., T, C_in), ``kernels`` is (C_out, C_in, K); output (..., T, C_out).
    """
    if padding != "same":
        raise ValueError("only 'same' padding is supported")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {c_in}")
    t = x.shape[-2]
    pad = (k - 1) * dilation // 2
    lead = x.shape[:-2]
    xp = np.zeros(lead + (t + 2 * pad, c_in), dtype=x.dtype)
    xp[..., pad : pad + t, :] = x.data
    cols = np.stack([xp[..., j * dilation : j * dilation + t, :] for j in range(k)], axis=-2)
    cols = cols.reshape(lead + (t, k * c_in))
    wmat = np.transpose(kernels.data, (2, 1, 0)).reshape(k * c_in, c_out)
    out = cols @ wmat

    def back(g):
        gw = np.swapaxes(cols, -1, -2) @ g
        gw = gw.reshape(-1, k * c_in, c_out).sum(axis=0) if gw.ndim > 2 else gw
        gk = np.transpose(gw.reshape(k, c_in, c_out), (2, 1, 0))
        gcols = (g @ wmat.T).reshape(lead + (t, k, c_in))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j * dilation : j * dilation + t, :] += gcols[..., j, :]
        return gxp[..., pad : pad + t, :], gk

    return _make(out, (x, kernels), back, "conv1d_dilated")


def receptive_field(kernel_size: int, dilations: Iterable[int]) -> int:
    return 1 + (kernel_size - 1) * sum(dilations)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes. Returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, Tensor(np.where(mask, 0.0, -1e9).astype(q.dtype)))
    w = softmax(scores, axis=-1)
    return matmul(w, v), w


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------
class Tape:
    """Topologically ordered list of the op nodes reachable from a loss."""

    def __init__(self, loss: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        self.ops = order

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphConsumedError("backward already ran on this graph; re-run the forward pass")
    tape = Tape(loss)
    for node in tape.ops:
        if node._released:
            raise GraphConsumedError("graph shares nodes with an already-consumed graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient reached a leaf tensor")
                node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._released = True
    return tape


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------
def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences in float64 for every element of every input."""
    xs = [Tensor(np.array(t.data, dtype=np.float64)) for t in inputs]
    out = []
    for x in xs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*xs).data)
            flat[i] = orig - step
            fm = float(f(*xs).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def grad_errors(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    abs_floor: float = 1e-6,
) -> list[float]:
    """Worst per-element relative error of autodiff vs central differences, per input.

    The relative error of an element is ``|a - n| / max(|a|, |n|)``; elements whose
    absolute error is below ``abs_floor`` count as exact.
    """
    xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    loss = f(*xs)
    backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]
    numeric = numeric_grad(f, inputs, step)
    errs = []
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
        rel = np.where(diff <= abs_floor, 0.0, rel)
        errs.append(float(rel.max()) if rel.size else 0.0)
    return errs


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    abs_floor: float = 1e-6,
) -> bool:
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    return max(grad_errors(f, inputs, step, abs_floor)) < tol
