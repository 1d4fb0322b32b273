"""Laplacian pyramids and their divisively normalized variant.

The multi-scale front end shared by the tone-mapping network and the
perceptual distance between HDR and LDR images. All operations accept
either plain ndarrays or engine :class:`~hdrtone.neural.engine.Tensor`
nodes, so the same decomposition code runs under the gradient tape; the
filters act on the last two axes, leading (batch) axes pass through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .neural import engine
from .neural.engine import Tensor

# Burt-Adelson style 5-tap lowpass; also the normalization kernel P.
LOWPASS_TAPS = (0.05, 0.25, 0.4, 0.25, 0.05)
# Divisive-normalization constants for bandpass/highpass and lowpass levels.
C0_BANDPASS = 0.17
C0_LOWPASS = 4.86

DEFAULT_LEVELS = 5


def _shape(x) -> tuple[int, int]:
    d = x.data if isinstance(x, Tensor) else x
    return d.shape[-2], d.shape[-1]


@dataclass
class LaplacianPyramid:
    """Bandpass levels (finest first) plus a lowpass residual at the end."""

    levels: list

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def shapes(self) -> list[tuple[int, int]]:
        return [_shape(z) for z in self.levels]


@dataclass
class NormalizedPyramid:
    """Divisively normalized pyramid; same level geometry as its source."""

    levels: list

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def downsample(x):
    """Lowpass with mirror boundaries, then keep every second sample.

    Output spatial dims are ceil(h/2) x ceil(w/2); a constant raster maps
    to the same constant because the kernel sums to one.
    """
    return engine.decimate2(engine.sepfilter5(x, LOWPASS_TAPS))


def upsample(x, target_h: int, target_w: int):
    """Zero-insert up to (target_h, target_w), then lowpass with gain 2."""
    h, w = _shape(x)
    if math.ceil(target_h / 2) != h or math.ceil(target_w / 2) != w:
        raise ValueError(
            f"target ({target_h}, {target_w}) is not the 2x refinement of ({h}, {w})")
    return engine.sepfilter5(engine.zero_upsample(x, target_h, target_w),
                             LOWPASS_TAPS, gain=2.0)


def build_laplacian(x, m: int = DEFAULT_LEVELS) -> LaplacianPyramid:
    """Recursive bandpass split: level i holds X(i) - upsample(X(i+1))."""
    if m < 1:
        raise ValueError(f"need at least one level, got m={m}")
    levels = []
    cur = x
    for _ in range(m - 1):
        h, w = _shape(cur)
        nxt = downsample(cur)
        levels.append(cur - upsample(nxt, h, w))
        cur = nxt
    levels.append(cur)
    return LaplacianPyramid(levels=levels)


def collapse(p: LaplacianPyramid):
    """Invert :func:`build_laplacian` by recursive upsample-and-add."""
    levels = p.levels
    shapes = [_shape(z) for z in levels]
    for i in range(len(levels) - 1):
        h, w = shapes[i]
        if shapes[i + 1] != (math.ceil(h / 2), math.ceil(w / 2)):
            raise ValueError(f"inconsistent level shapes {shapes[i]} -> {shapes[i + 1]}")
    x = levels[-1]
    for i in range(len(levels) - 2, -1, -1):
        h, w = shapes[i]
        x = levels[i] + upsample(x, h, w)
    return x


def normalize_pyramid(p: LaplacianPyramid,
                      c0_band: float = C0_BANDPASS,
                      c0_low: float = C0_LOWPASS) -> NormalizedPyramid:
    """Divide each coefficient by a local magnitude estimate plus a constant.

    Bandpass and highpass levels use the 5-tap kernel on |Z|; the lowpass
    residual uses the identity filter with its own constant, so every
    denominator is strictly positive.
    """
    out = []
    for i, z in enumerate(p.levels):
        if i < len(p.levels) - 1:
            denom = engine.sepfilter5(engine.absolute(z), LOWPASS_TAPS) + c0_band
        else:
            denom = engine.absolute(z) + c0_low
        out.append(z / denom)
    return NormalizedPyramid(levels=out)


def level_shapes(h: int, w: int, m: int) -> list[tuple[int, int]]:
    """Spatial dims of each level of an m-level pyramid over (h, w)."""
    shapes = [(h, w)]
    for _ in range(m - 1):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        shapes.append((h, w))
    return shapes
