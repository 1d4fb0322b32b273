"""Separable 5-tap filtering with mirror boundaries, plus exact adjoints.

All routines act on the last two axes of an array and preserve dtype;
leading axes (batch, channel) pass through untouched. The adjoints are
the algebraic transposes of the forward maps, used by the reverse-mode
engine.
"""

from __future__ import annotations

import numpy as np


def mirror_indices(n: int, pad: int) -> np.ndarray:
    """Source indices for mirror-without-repeat extension of length n by pad."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    j = np.mod(idx, period)
    return np.where(j >= n, period - j, j)


def _conv1d_valid(xp: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Correlate a padded array with ``taps`` along ``axis`` ('valid' output)."""
    k = len(taps)
    n_out = xp.shape[axis] - k + 1
    sl = [slice(None)] * xp.ndim
    sl[axis] = slice(0, n_out)
    out = taps[0] * xp[tuple(sl)]
    for t in range(1, k):
        sl[axis] = slice(t, t + n_out)
        out += taps[t] * xp[tuple(sl)]
    return out


def _axis_filter(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    pad = (len(taps) - 1) // 2
    idx = mirror_indices(x.shape[axis], pad)
    xp = np.take(x, idx, axis=axis)
    return _conv1d_valid(xp, taps, axis)


def _axis_filter_adjoint(g: np.ndarray, taps: np.ndarray, axis: int, n: int) -> np.ndarray:
    """Transpose of mirror-pad followed by valid correlation, along one axis."""
    k = len(taps)
    pad = (k - 1) // 2
    shape = list(g.shape)
    shape[axis] = n + 2 * pad
    gp = np.zeros(shape, dtype=g.dtype)
    sl = [slice(None)] * g.ndim
    for t in range(k):
        sl[axis] = slice(t, t + g.shape[axis])
        gp[tuple(sl)] += taps[t] * g
    # fold the padded borders back onto their mirror sources
    idx = mirror_indices(n, pad)
    sl[axis] = slice(pad, pad + n)
    gx = np.ascontiguousarray(gp[tuple(sl)])
    take = [slice(None)] * g.ndim
    put = [slice(None)] * g.ndim
    for p in range(pad):
        for pos in (p, n + 2 * pad - 1 - p):
            take[axis] = pos
            put[axis] = int(idx[pos])
            gx[tuple(put)] += gp[tuple(take)]
    return gx


def sepfilter(x: np.ndarray, taps, gain: float = 1.0) -> np.ndarray:
    """Separable odd-length filter under mirror extension, rows then columns."""
    t = np.asarray(taps, dtype=x.dtype) * x.dtype.type(gain)
    return _axis_filter(_axis_filter(x, t, x.ndim - 1), t, x.ndim - 2)


def sepfilter_adjoint(g: np.ndarray, taps, h: int, w: int, gain: float = 1.0) -> np.ndarray:
    t = np.asarray(taps, dtype=g.dtype) * g.dtype.type(gain)
    return _axis_filter_adjoint(_axis_filter_adjoint(g, t, g.ndim - 2, h), t, g.ndim - 1, w)


def decimate2(x: np.ndarray) -> np.ndarray:
    """Keep every second sample (starting at 0) along the last two axes."""
    return np.ascontiguousarray(x[..., ::2, ::2])


def decimate2_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
    out[..., ::2, ::2] = g
    return out


def zero_upsample(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Insert zeros so samples land on the even grid of an (h, w) raster."""
    out = np.zeros(x.shape[:-2] + (h, w), dtype=x.dtype)
    out[..., ::2, ::2] = x
    return out


def zero_upsample_adjoint(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(g[..., ::2, ::2])
