"""Dense tensors with a reverse-mode tape.

Every op produces a new :class:`Tensor`; when any input requires a gradient
the output remembers its parents and a closure that pushes the upstream
gradient back into them. :func:`backward` walks the graph in reverse
topological order. Graphs are rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "precision",
    "default_dtype",
    "tensor",
    "backward",
    "matmul",
    "concat",
    "where",
    "take_rows",
    "scatter_rows",
    "softmax",
    "normalize",
    "layer_norm",
    "group_norm",
    "gelu",
    "silu",
    "relu",
    "attention",
    "conv2d",
    "upsample2x",
]

_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE and not _parents:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_lift(other))

    def __rsub__(self, other):
        return _add(_lift(other), -self)

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return _mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return _mul(_lift(other), self ** -1.0)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g, "neg")

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        out = x ** exponent
        return _unary(self, out, lambda g: g * exponent * x ** (exponent - 1), "pow")

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- reductions and reshaping ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape)

        return _unary(self, np.asarray(out), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {src} into {shape}") from None
        return _unary(self, out, lambda g: g.reshape(src), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inv), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _unary(self, out, lambda g: g * out, "exp")

    def log(self) -> "Tensor":
        x = self.data
        return _unary(self, np.log(x), lambda g: g / x, "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _unary(self, out, lambda g: g * 0.5 / out, "sqrt")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _unary(self, out, lambda g: g * (1.0 - out * out), "tanh")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, what: str) -> Tensor:
    """Wrap an op result and attach the backward closure when needed.

    ``backward_fn(g)`` returns one gradient per parent (``None`` to skip).
    """
    _check_finite(data, what)
    if data.dtype != _DTYPE and np.issubdtype(data.dtype, np.floating):
        data = data.astype(_DTYPE)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unary(x: Tensor, out: np.ndarray, grad_fn: Callable, what: str) -> Tensor:
    return _make(np.asarray(out), (x,), lambda g: (grad_fn(g),), what)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * y, x.shape) if a.requires_grad else None
        gb = _unbroadcast(g * x, y.shape) if b.requires_grad else None
        return ga, gb

    return _make(x * y, (a, b), grad_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: shapes {x.shape} and {y.shape} are not aligned")
    out = x @ y

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if x.ndim > 2 and y.ndim == 2:
                # fold batch axes into one big product
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape = x.shape

    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return _unary(x, np.array(out), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, grad_fn, "concat")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; ``mask`` is a constant boolean array."""
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "where")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), grad_fn, "take_rows")


def scatter_rows(values: Tensor, index: tuple, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``values`` written at ``index`` (an advanced index)."""
    out = np.zeros(shape, dtype=values.dtype)
    out[index] = values.data

    def grad_fn(g):
        return (g[index],)

    return _make(out, (values,), grad_fn, "scatter_rows")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), grad_fn, "softmax")


def normalize(x: Tensor, axes: tuple, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (no affine)."""
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def grad_fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    return _make(xhat, (x,), grad_fn, "normalize")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    y = normalize(x, (-1,), eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization for channels-last tensors ``(B, H, W, C)``."""
    b, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    cg = c // groups
    n = h * w * cg
    d = x.data.reshape(b, h * w, c)

    def group_mean(v):
        # (B, HW, C) -> (B, 1, C) holding each channel's group mean
        s = v.sum(axis=1).reshape(b, groups, cg).sum(axis=2) / n
        return np.repeat(s, cg, axis=1)[:, None, :]

    xc = d - group_mean(d)
    rstd = 1.0 / np.sqrt(group_mean(xc * xc) + eps)
    xhat = xc * rstd

    def grad_fn(g):
        g = g.reshape(b, h * w, c)
        dx = rstd * (g - group_mean(g) - xhat * group_mean(g * xhat))
        return (dx.reshape(b, h, w, c),)

    y = _make(xhat.reshape(b, h, w, c), (x,), grad_fn, "group_norm")
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


_GELU_K = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; odd part is exact: gelu(x) - gelu(-x) == x."""
    d = x.data
    inner = _GELU_K * (d + 0.044715 * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), grad_fn, "gelu")


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = 1.0 / (1.0 + np.exp(-d))
    out = d * s

    def grad_fn(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (x,), grad_fn, "silu")


def relu(x: Tensor) -> Tensor:
    d = x.data
    pos = d > 0
    return _make(np.where(pos, d, 0), (x,), lambda g: (np.where(pos, g, 0),), "relu")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``q`` is ``(..., Lq, d)``, ``k`` and ``v`` are ``(..., Lk, d)``; ``mask`` is
    a boolean ``(Lq, Lk)`` array with True where attention is allowed.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2]:
        raise ShapeError(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape} incompatible")
    scale = 1.0 / float(np.sqrt(qd.shape[-1]))
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def grad_fn(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gp = g @ np.swapaxes(vd, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = _unbroadcast(gs @ kd, qd.shape)
            if k.requires_grad:
                gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd, kd.shape)
        return gq, gk, gv

    return _make(out, (q, k, v), grad_fn, "attention")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    # (B, Ho, Wo, C, k, k) -> (B, Ho, Wo, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """'Same'-padded convolution on channels-last input.

    ``x`` is ``(B, H, W, Cin)``; ``weight`` is ``(k, k, Cin, Cout)``.
    """
    xd, wd = x.data, weight.data
    k, k2, cin, cout = wd.shape
    if k != k2 or xd.ndim != 4 or xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {xd.shape} incompatible with weight {wd.shape}")
    b, h, w, _ = xd.shape
    if k == 1 and stride == 1:
        cols = xd.reshape(-1, cin)
    else:
        cols = _im2col(xd, k, stride).reshape(-1, k * k * cin)
    ho, wo = (h + stride - 1) // stride, (w + stride - 1) // stride
    out = (cols @ wd.reshape(-1, cout)).reshape(b, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = g2 @ wd.reshape(-1, cout).T
            if k == 1 and stride == 1:
                gx = gcols.reshape(xd.shape)
            else:
                gx = _col2im(gcols.reshape(b, ho, wo, k, k, cin), xd.shape, k, stride)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, grad_fn, "conv2d")


def _col2im(gcols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    b, h, w, c = shape
    pad = k // 2
    ho, wo = gcols.shape[1], gcols.shape[2]
    gp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
    return gp[:, pad:pad + h, pad:pad + w]


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``(B, H, W, C)``."""
    d = x.data
    out = d.repeat(2, axis=1).repeat(2, axis=2)
    b, h, w, c = d.shape

    def grad_fn(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), grad_fn, "upsample2x")


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are released as soon as they are consumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = None
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.data.dtype:
                pg = pg.astype(parent.data.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
