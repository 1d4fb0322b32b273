"""Minimal reverse-mode differentiation engine over numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operations applied to
it; calling :meth:`Tensor.backward` walks the recorded graph and leaves
exact gradients on every tensor created with ``requires_grad=True``.

The op set is deliberately small: elementwise arithmetic, a few
reductions, the dilated convolution the context-aggregation networks
are built from, and the fixed-kernel pyramid filters. Every module-level
op accepts plain ndarrays too and then simply computes the forward
value, so the same code paths serve inference and training.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .. import _filters

try:  # optional compiled kernels; every caller has a numpy fallback
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build environment
    _kernels = None

__all__ = [
    "Tensor",
    "absolute",
    "clamp",
    "conv2d_dilated",
    "decimate2",
    "exp",
    "leaky_relu",
    "mean",
    "power",
    "sepfilter5",
    "tsum",
    "zero_upsample",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to our reflected operators instead of broadcasting
    # element-wise into object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    # -- graph machinery ----------------------------------------------------

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g), self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor; seeds with ones if no grad given."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data + other.data, parents=(self, other))
            out._backward = lambda g: (self._accum(g), other._accum(g))
        else:
            out = Tensor(self.data + other, parents=(self,))
            out._backward = lambda g: self._accum(g)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data - other.data, parents=(self, other))
            out._backward = lambda g: (self._accum(g), other._accum(-g))
        else:
            out = Tensor(self.data - other, parents=(self,))
            out._backward = lambda g: self._accum(g)
        return out

    def __rsub__(self, other):
        out = Tensor(other - self.data, parents=(self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data * other.data, parents=(self, other))
            out._backward = lambda g: (self._accum(g * other.data),
                                       other._accum(g * self.data))
        else:
            out = Tensor(self.data * other, parents=(self,))
            out._backward = lambda g: self._accum(g * other)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data / other.data, parents=(self, other))

            def back(g):
                self._accum(g / other.data)
                other._accum(-g * self.data / (other.data * other.data))

            out._backward = back
        else:
            out = Tensor(self.data / other, parents=(self,))
            out._backward = lambda g: self._accum(g / other)
        return out

    def __rtruediv__(self, other):
        out = Tensor(other / self.data, parents=(self,))
        out._backward = lambda g: self._accum(-g * other / (self.data * self.data))
        return out

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._backward = lambda g: self._accum(g.reshape(old))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))

        def back(g):
            z = np.zeros_like(self.data)
            z[idx] = g
            self._accum(z)

        out._backward = back
        return out


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# ---------------------------------------------------------------------------
# elementwise / reduction ops (dual backend: Tensor or ndarray)
# ---------------------------------------------------------------------------


def power(x, p: float):
    """x**p for scalar p; gradient defined as 0 at x == 0 when p < 1."""
    xd = _data(x)
    val = np.power(xd, p)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(xd, p - 1.0)
        d = np.where(xd == 0, 0.0, d)
        x._accum(g * d)

    out._backward = back
    return out


def absolute(x):
    xd = _data(x)
    val = np.abs(xd)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(g * np.sign(xd))
    return out


def exp(x):
    xd = _data(x)
    val = np.exp(xd)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(g * val)
    return out


def leaky_relu(x, slope: float = 0.2):
    """max(slope*z, z) elementwise; slope gradient on the negative side."""
    xd = _data(x)
    val = np.where(xd > 0, xd, slope * xd)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(g * np.where(xd > 0, 1.0, slope).astype(g.dtype))
    return out


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes wherever lo <= x <= hi."""
    xd = _data(x)
    val = np.clip(xd, lo, hi)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))
    mask = (xd >= lo) & (xd <= hi)
    out._backward = lambda g: x._accum(g * mask)
    return out


def tsum(x, axis=None, keepdims: bool = False):
    xd = _data(x)
    val = xd.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))

    def back(g):
        if axis is None:
            x._accum(np.broadcast_to(g, xd.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accum(np.broadcast_to(gg, xd.shape))

    out._backward = back
    return out


def mean(x, axis=None, keepdims: bool = False):
    xd = _data(x)
    if axis is None:
        count = xd.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([xd.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# pyramid filter ops
# ---------------------------------------------------------------------------


def sepfilter5(x, taps: Sequence[float], gain: float = 1.0):
    """Separable filtering with mirror boundaries on the last two axes."""
    xd = _data(x)
    val = _filters.sepfilter(xd, taps, gain)
    if not isinstance(x, Tensor):
        return val
    h, w = xd.shape[-2:]
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(_filters.sepfilter_adjoint(g, taps, h, w, gain))
    return out


def decimate2(x):
    """Keep every second sample starting at index 0, both spatial axes."""
    xd = _data(x)
    val = _filters.decimate2(xd)
    if not isinstance(x, Tensor):
        return val
    h, w = xd.shape[-2:]
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(_filters.decimate2_adjoint(g, h, w))
    return out


def zero_upsample(x, h: int, w: int):
    xd = _data(x)
    val = _filters.zero_upsample(xd, h, w)
    if not isinstance(x, Tensor):
        return val
    out = Tensor(val, parents=(x,))
    out._backward = lambda g: x._accum(_filters.zero_upsample_adjoint(g))
    return out


# ---------------------------------------------------------------------------
# dilated convolution (zero padding, same resolution, cross-correlation)
# ---------------------------------------------------------------------------

_TILE_BYTES = 8 << 20  # im2col working-set target for the streaming path


def _im2col(xp: np.ndarray, k: int, d: int, h: int, w: int, y0: int, rows: int,
            out: np.ndarray | None = None) -> np.ndarray:
    """Columns (Ci*k*k, N*rows*w) for output rows [y0, y0+rows)."""
    n, ci = xp.shape[:2]
    cols = out if out is not None else np.empty((ci * k * k, n * rows * w), xp.dtype)
    view = cols.reshape(ci, k * k, n, rows, w)
    t = 0
    for ky in range(k):
        for kx in range(k):
            view[:, t] = xp[:, :, y0 + ky * d:y0 + ky * d + rows,
                            kx * d:kx * d + w].swapaxes(0, 1)
            t += 1
    return cols


def _pad_input(xd: np.ndarray, p: int, out: np.ndarray | None = None) -> np.ndarray:
    if p == 0:
        return xd
    n, c, h, w = xd.shape
    if out is None:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), xd.dtype)
    else:
        xp = out
    xp[:, :, p:p + h, p:p + w] = xd
    return xp


def _conv_forward_tiled(xd: np.ndarray, wd: np.ndarray, d: int,
                        stats_out: dict | None = None) -> np.ndarray:
    """Streaming im2col + GEMM; the column tile stays cache-resident."""
    n, ci, h, w = xd.shape
    co, _, k, _ = wd.shape
    p = d * (k - 1) // 2
    if (_kernels is not None and k == 3 and co in _kernels.WIDTHS and ci >= 8
            and xd.dtype == np.float32 and wd.dtype == np.float32):
        return _conv_forward_direct(xd, wd, d, stats_out)
    a = wd.reshape(co, ci * k * k)
    out = np.empty((n, co, h, w), xd.dtype)
    rows = max(1, min(h, _TILE_BYTES // max(1, ci * k * k * w * xd.itemsize)))
    cols = np.empty((ci * k * k, rows * w), xd.dtype)
    pad_buf = np.zeros((1, ci, h + 2 * p, w + 2 * p), xd.dtype) if p else None
    for i in range(n):
        xp = _pad_input(xd[i:i + 1], p, out=pad_buf)
        for y0 in range(0, h, rows):
            r = min(rows, h - y0)
            c_tile = _im2col(xp, k, d, h, w, y0, r, out=cols[:, :r * w])
            np.matmul(a, c_tile, out=out[i, :, y0:y0 + r, :].reshape(co, r * w))
    return out


def _conv_forward_direct(xd: np.ndarray, wd: np.ndarray, d: int,
                         stats_out: dict | None = None) -> np.ndarray:
    """Compiled direct convolution for the 3x3 CAN widths (zero boundary)."""
    n, ci, h, w = xd.shape
    co = wd.shape[0]
    wt = np.zeros((3, 3, ci, _kernels.LANES), np.float32)
    wt[:, :, :, :co] = wd.transpose(2, 3, 1, 0)
    out = np.empty((n, co, h, w), np.float32)
    xc = np.ascontiguousarray(xd)
    ssum = np.zeros(co, np.float64)
    ssq = np.zeros(co, np.float64)
    for i in range(n):
        _kernels.conv3x3(xc[i], wt, out[i], d, ssum, ssq)
    if stats_out is not None:
        stats_out["sum"] = ssum
        stats_out["sum_sq"] = ssq
    return out


def _conv_forward_recorded(xd: np.ndarray, wd: np.ndarray, d: int):
    n, ci, h, w = xd.shape
    co, _, k, _ = wd.shape
    p = d * (k - 1) // 2
    xp = _pad_input(xd, p)
    cols = _im2col(xp, k, d, h, w, 0, h)
    a = wd.reshape(co, ci * k * k)
    out = np.moveaxis((a @ cols).reshape(co, n, h, w), 0, 1)
    return np.ascontiguousarray(out), cols


def conv2d_dilated(x, w, dilation: int = 1, bias=None, _stats: dict | None = None):
    """Same-resolution dilated convolution of (N, Ci, H, W) by (Co, Ci, k, k).

    Zero padding of ``dilation * (k - 1) / 2`` per side keeps the output
    resolution equal to the input. Gradients are produced for the input,
    the weights, and the bias (when given). ``_stats`` is a private
    side-channel: the compiled path deposits per-channel output sums
    there so the normalization that follows can skip its own pass.
    """
    xd, wd = _data(x), _data(w)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d_dilated expects (N, Ci, H, W) input and (Co, Ci, k, k) weights")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, weights expect {wd.shape[1]}")
    if wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 != 1:
        raise ValueError("kernels must be square with odd size")
    bd = _data(bias) if bias is not None else None

    if not _is_tensor(x, w, bias if bias is not None else x):
        out = _conv_forward_tiled(xd, wd, dilation, _stats)
        if bd is not None:
            out += bd[None, :, None, None]
        return out

    n, ci, h, w_ = xd.shape
    co, _, k, _ = wd.shape
    d = dilation
    p = d * (k - 1) // 2
    val, cols = _conv_forward_recorded(xd, wd, d)
    if bd is not None:
        val = val + bd[None, :, None, None]
    parents = tuple(t for t in (x, w, bias) if isinstance(t, Tensor))
    out = Tensor(val, parents=parents)

    def back(g):
        gf = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(co, n * h * w_)
        if isinstance(w, Tensor):
            w._accum((gf @ cols.T).reshape(co, ci, k, k))
        if isinstance(bias, Tensor):
            bias._accum(g.sum(axis=(0, 2, 3)))
        if isinstance(x, Tensor):
            a = wd.reshape(co, ci * k * k)
            gcols = (a.T @ gf).reshape(ci * k * k, n, h, w_)
            gxp = np.zeros((n, ci, h + 2 * p, w_ + 2 * p), g.dtype)
            r = 0
            for c in range(ci):
                for ky in range(k):
                    for kx in range(k):
                        gxp[:, c, ky * d:ky * d + h, kx * d:kx * d + w_] += gcols[r]
                        r += 1
            x._accum(gxp[:, :, p:p + h, p:p + w_] if p else gxp)

    out._backward = back
    return out
