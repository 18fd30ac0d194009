"""Dense tensors with taped reverse-mode differentiation.

Only the operations needed by the keypoint autoencoder live here. Every op
builds its output eagerly with numpy and records a closure that maps the
output gradient back onto its inputs; :meth:`Tensor.backward` replays the
tape in reverse topological order.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = (np.float32, np.float64)
PARAM_GROUPS = ("net", "edge_weight", "alpha", "thickness")


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """An n-dimensional array that remembers how it was computed.

    Attributes:
        data: the numpy array holding the values (float32 or float64).
        grad: accumulated gradient, same shape as ``data``; ``None`` until a
            backward pass reaches this tensor.
        requires_grad: whether gradients should be propagated into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # ------------------------------------------------------------------ info
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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones) to every tensor on the tape."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate gradients are not needed once pushed upstream
                    node.grad = None

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Param(Tensor):
    """A trainable leaf tensor tagged with its learning-rate group."""

    __slots__ = ("group",)

    def __init__(self, data, group: str = "net", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {PARAM_GROUPS}")
        self.group = group
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.dtype:
        g = g.astype(t.dtype)
    if t.grad is None:
        t.grad = g
    elif isinstance(t, Param):
        t.grad += g
    else:
        t.grad = t.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_dtype(*ts: Tensor) -> None:
    dt = {t.dtype for t in ts}
    if len(dt) > 1:
        raise TypeError(f"mixed dtypes {sorted(str(d) for d in dt)}; cast explicitly")


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data.astype(a.dtype, copy=False), (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    data = x.data * x.data

    def backward(g):
        _accumulate(x, 2.0 * x.data * g)

    return _result(data, (x,), backward, "square")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _result
        data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)

    return _result(data, (x,), backward, "exp")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow warnings."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def softplus_np(x: np.ndarray) -> np.ndarray:
    clipped = np.clip(x, -20.0, 20.0)
    mid = np.log1p(np.exp(clipped))
    out = np.where(x > 20.0, x, np.where(x < -20.0, np.exp(np.minimum(x, 0.0)), mid))
    return out.astype(x.dtype, copy=False)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x); linear above 20 and exponential below -20."""
    x = as_tensor(x)
    data = softplus_np(x.data)

    def backward(g):
        _accumulate(x, g * sigmoid_np(x.data))

    return _result(data, (x,), backward, "softplus")


def inverse_softplus(y: float) -> float:
    """Raw value whose softplus equals ``y`` (y > 0)."""
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    if y > 20.0:
        return float(y)
    return float(np.log(np.expm1(y)))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x) for slope < 1; derivative taken as 1 at x == 0."""
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    data = np.maximum(x.data, x.data * x.dtype.type(slope))

    def backward(g):
        scale = np.where(x.data >= 0, x.dtype.type(1.0), x.dtype.type(slope))
        _accumulate(x, g * scale)

    return _result(data, (x,), backward, "leaky_relu")


# ------------------------------------------------------------------ reductions
def tsum(x: Tensor, axis=None) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            full = np.broadcast_to(g, x.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        _accumulate(x, np.array(full))

    return _result(data, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(data, (x,), backward, "reshape")


def index(x: Tensor, idx) -> Tensor:
    data = np.array(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _result(data, (x,), backward, "index")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(data, (a, b), backward, "matmul")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join along the channel axis (third from last: C of CxHxW or NCHW)."""
    _check_dtype(a, b)
    if a.ndim != b.ndim or a.ndim < 3:
        raise ValueError(f"concat_channels needs equal-rank tensors with >= 3 dims, got {a.shape} and {b.shape}")
    ax = a.ndim - 3
    for d in range(a.ndim):
        if d != ax and a.shape[d] != b.shape[d]:
            raise ValueError(f"concat_channels: dimension {d} differs ({a.shape[d]} vs {b.shape[d]})")
    ca = a.shape[ax]
    data = np.concatenate([a.data, b.data], axis=ax)

    def backward(g):
        ga, gb = np.split(g, [ca], axis=ax)
        _accumulate(a, np.ascontiguousarray(ga))
        _accumulate(b, np.ascontiguousarray(gb))

    return _result(data, (a, b), backward, "concat_channels")


def spatial_softmax(h: Tensor) -> Tensor:
    """Softmax over the last two (spatial) axes, independently per channel."""
    lead = h.shape[:-2]
    flat = h.data.reshape(lead + (-1,))
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    data = y.reshape(h.shape)

    def backward(g):
        gf = g.reshape(lead + (-1,))
        gx = y * (gf - (gf * y).sum(axis=-1, keepdims=True))
        _accumulate(h, gx.reshape(h.shape))

    return _result(data, (h,), backward, "spatial_softmax")


# ----------------------------------------------------------------- convolution
def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    _check_dtype(x, w)
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    _, c, hgt, wid = x.shape
    _, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, kernel expects I={ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel spatial extent must be odd, got {kh}x{kw}")
    ho, wo = _conv_out(hgt, kh, stride, pad), _conv_out(wid, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for height/width {hgt}x{wid}")
    return ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkHkW kernel, zero padded.

    Output spatial size is ``(H + 2*pad - kH) // stride + 1``. Stride-1 layers
    multiply every kernel tap against the whole padded input in one product
    and sum shifted slices of the result; strided layers gather patches
    into a (kH*kW*C, N*Ho*Wo) buffer instead. Both are exact reorderings of
    the same sums.
    """
    ho, wo = _check_conv(x, w, stride, pad)
    if stride == 1:
        out = _conv_shift(x, w, pad, ho, wo, bias)
    else:
        out = _conv_gather(x, w, stride, pad, ho, wo, bias)
    return out


def _conv_shift(x, w, pad, ho, wo, bias):
    n, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    hp, wp = hgt + 2 * pad, wid + 2 * pad
    xc = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xc[:, :, pad : pad + hgt, pad : pad + wid] = x.data.transpose(1, 0, 2, 3)
    xf = xc.reshape(c, -1)
    # rows ordered (tap i, tap j, out channel)
    wstack = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)).reshape(kh * kw * o, c)
    y = (wstack @ xf).reshape(kh, kw, o, n, hp, wp)
    out = np.array(y[0, 0, :, :, :ho, :wo])
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += y[i, j, :, :, i : i + ho, j : j + wo]
    del y
    if bias is not None:
        out += bias.data[:, None, None, None]
    data = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gt.sum(axis=(1, 2, 3)))
        dy = np.zeros((kh, kw, o, n, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dy[i, j, :, :, i : i + ho, j : j + wo] = gt
        dy = dy.reshape(kh * kw * o, -1)
        if w.requires_grad:
            gw = (dy @ xf.T).reshape(kh, kw, o, c).transpose(2, 3, 0, 1)
            _accumulate(w, np.ascontiguousarray(gw))
        if x.requires_grad:
            gx = (wstack.T @ dy).reshape(c, n, hp, wp)[:, :, pad : pad + hgt, pad : pad + wid]
            _accumulate(x, np.ascontiguousarray(gx.transpose(1, 0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(data, parents, backward, "conv2d")


def _conv_gather(x, w, stride, pad, ho, wo, bias):
    n, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    # kernel as (O, kH*kW*C), matching the patch buffer row order
    wm = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(o, -1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    data = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            _accumulate(w, np.ascontiguousarray(gw))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gm.sum(axis=1))
        if not x.requires_grad:
            return
        dcols = (wm.T @ gm).reshape(kh, kw, c, n, ho, wo)
        gp = np.zeros((c, n, hgt + 2 * pad, wid + 2 * pad), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
        gx = gp[:, :, pad : pad + hgt, pad : pad + wid].transpose(1, 0, 2, 3)
        _accumulate(x, np.ascontiguousarray(gx))

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(data, parents, backward, "conv2d")


# -------------------------------------------------------------------- resizing
def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the last two axes (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    ah = bilinear_matrix(x.shape[-2], out_h, x.dtype)
    aw = bilinear_matrix(x.shape[-1], out_w, x.dtype)
    data = ah @ (x.data @ aw.T)

    def backward(g):
        _accumulate(x, (ah.T @ g) @ aw)

    return _result(data, (x,), backward, "resize_bilinear")

