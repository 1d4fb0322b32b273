"""Two-stage tone mapping: pyramid CANs, stack generation, weighted fusion.

Stage one turns a calibrated luminance image into display luminance in
[5, 300] cd/m^2 by predicting the Laplacian pyramid of the output from
the normalized pyramid of the input. Stage two tone-maps one scene
under several simulated maximum luminances and fuses the resulting
stack with predicted per-pixel weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import pyramid
from .errors import CheckpointError
from .io import HdrImage, LdrImage, LuminanceMap, calibrate, color_reproduce, extract_luminance
from .metrics import ExposureStack
from .neural import engine
from .neural.can import CanConfig, CanParams, _run_layers, init_can_params
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.engine import Tensor

DISPLAY_MIN = 5.0
DISPLAY_MAX = 300.0
GAMMA = 1.0 / 2.6
DEFAULT_SMAX_RANGE = (1e3, 1e7)


def to_unit_range(display_lum, i_min: float = DISPLAY_MIN, i_max: float = DISPLAY_MAX):
    """Affine [i_min, i_max] -> [0, 1]."""
    return (display_lum - i_min) / (i_max - i_min)


def from_unit_range(values, i_min: float = DISPLAY_MIN, i_max: float = DISPLAY_MAX):
    """Affine [0, 1] -> [i_min, i_max]."""
    return i_min + (i_max - i_min) * values


@dataclass
class ToneMapModel:
    """Shared bandpass/highpass CAN plus the dedicated lowpass CAN."""

    band: CanParams
    low: CanParams
    levels: int = pyramid.DEFAULT_LEVELS
    i_min: float = DISPLAY_MIN
    i_max: float = DISPLAY_MAX
    band_cfg: CanConfig = field(default_factory=CanConfig.tone_mapping)
    low_cfg: CanConfig = field(default_factory=CanConfig.tone_mapping)

    @staticmethod
    def init(rng: np.random.Generator, levels: int = pyramid.DEFAULT_LEVELS) -> "ToneMapModel":
        cfg = CanConfig.tone_mapping()
        return ToneMapModel(band=init_can_params(cfg, rng),
                            low=init_can_params(cfg, rng), levels=levels)


@dataclass
class FusionModel:
    """Weight-map CAN shared across all pseudo-exposures."""

    params: CanParams
    cfg: CanConfig = field(default_factory=CanConfig.fusion)

    @staticmethod
    def init(rng: np.random.Generator) -> "FusionModel":
        cfg = CanConfig.fusion()
        return FusionModel(params=init_can_params(cfg, rng), cfg=cfg)


@dataclass
class WeightMaps:
    """Per-pixel fusion weights; nonnegative, summing to one across the stack."""

    maps: np.ndarray  # (K, H, W)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be (K, H, W), got {self.maps.shape}")

    @property
    def k(self) -> int:
        return self.maps.shape[0]


def _as_array(lum) -> np.ndarray:
    return lum.lum if isinstance(lum, LuminanceMap) else np.asarray(lum, dtype=np.float64)


def _params_triple(params: CanParams, tensors: bool):
    if tensors:
        w = [Tensor(a, requires_grad=True) for a in params.weights]
        b = [None if a is None else Tensor(a, requires_grad=True) for a in params.biases]
        an = [None if a is None else Tensor(a, requires_grad=True) for a in params.an]
        return w, b, an
    return params.weights, params.biases, params.an


def tone_map_core(s_batch, model: ToneMapModel, band_p=None, low_p=None):
    """Differentiable stage-one path: calibrated luminance to display luminance.

    ``s_batch`` is (H, W) or (B, H, W); parameters default to the model's
    arrays and may be replaced by engine tensors during training. The
    collapsed prediction is treated as a nominal [-1, 1] signal, mapped
    affinely onto the gamma-domain display interval, clamped there, and
    raised back to linear luminance.
    """
    band_p = _params_triple(model.band, False) if band_p is None else band_p
    low_p = _params_triple(model.low, False) if low_p is None else low_p

    dtype = model.band.weights[0].dtype
    sg = np.power(np.asarray(s_batch), GAMMA).astype(dtype)
    squeeze = sg.ndim == 2
    if squeeze:
        sg = sg[None]
    norm = pyramid.normalize_pyramid(pyramid.build_laplacian(sg, model.levels))

    out_levels = []
    n_levels = len(norm.levels)
    for i, level in enumerate(norm.levels):
        x = level[:, None]  # (B, 1, h, w); the input side carries no gradients
        cfg = model.low_cfg if i == n_levels - 1 else model.band_cfg
        p = low_p if i == n_levels - 1 else band_p
        out_levels.append(_run_layers(x, cfg, *p))

    collapsed = pyramid.collapse(pyramid.LaplacianPyramid(levels=out_levels))
    g_lo = model.i_min**GAMMA
    g_hi = model.i_max**GAMMA
    mapped = g_lo + (g_hi - g_lo) * ((collapsed + 1.0) * 0.5)
    display = engine.power(engine.clamp(mapped, g_lo, g_hi), 1.0 / GAMMA)
    if isinstance(display, Tensor):
        display = display.reshape(display.shape[0], *display.shape[2:])
        return display
    display = display[:, 0]
    return display[0] if squeeze else display


def tone_map_single(s: LuminanceMap, model: ToneMapModel) -> LuminanceMap:
    """Tone-map one calibrated luminance image into [i_min, i_max] cd/m^2."""
    if isinstance(s, LuminanceMap) and not s.calibrated:
        raise ValueError("tone_map_single requires a calibrated luminance map")
    arr = _as_array(s)
    if arr.min() <= 0:
        raise ValueError("calibrated luminance must be strictly positive")
    out = tone_map_core(arr, model)
    return LuminanceMap(np.asarray(out, dtype=np.float64), calibrated=True)


def stack_max_luminances(k: int, s_range=DEFAULT_SMAX_RANGE) -> np.ndarray:
    """K maximum luminances, log-uniform over s_range inclusive (low end for K=1)."""
    lo, hi = s_range
    if k < 1:
        raise ValueError("stack length must be at least 1")
    if not (0 < lo < hi):
        raise ValueError(f"need an increasing positive range, got {s_range}")
    return np.logspace(math.log10(lo), math.log10(hi), k)


def generate_stack(hdr_lum, model: ToneMapModel, k: int = 5,
                   s_range=DEFAULT_SMAX_RANGE, s_min: float = DISPLAY_MIN) -> ExposureStack:
    """Pseudo-multi-exposure stack: one tone mapping per simulated S_max."""
    lum = LuminanceMap(_as_array(hdr_lum))
    smax_values = stack_max_luminances(k, s_range)
    images = []
    for smax in smax_values:
        display = tone_map_single(calibrate(lum, s_min, smax), model)
        images.append(np.clip(to_unit_range(display.lum, model.i_min, model.i_max), 0.0, 1.0))
    return ExposureStack(images=np.stack(images), max_luminances=smax_values)


def fuse_weights_core(stack_images, model: FusionModel, params=None):
    """Fusion CAN logits -> per-pixel softmax across the stack.

    The stack rides the batch axis, sharing parameters across exposures.
    Returns (weights, fused) in the caller's backend.
    """
    params = _params_triple(model.params, False) if params is None else params
    dtype = model.params.weights[0].dtype
    imgs = np.asarray(stack_images, dtype=dtype)
    x = imgs[:, None]  # (K, 1, H, W): exposures ride the batch axis
    logits = _run_layers(x, model.cfg, *params)
    k = x.shape[0]
    if isinstance(logits, Tensor):
        logits = logits.reshape(k, *x.shape[2:])
        shift = logits.data.max(axis=0, keepdims=True)  # constant softmax shift
        e = engine.exp(logits - shift)
        weights = e / engine.tsum(e, axis=0, keepdims=True)
        fused = engine.tsum(weights * imgs, axis=0)
        return weights, fused
    logits = logits[:, 0]
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=0, keepdims=True)
    fused = (weights * imgs).sum(axis=0)
    return weights, fused


def fuse_stack(stack: ExposureStack, model: FusionModel):
    """Weighted summation of the stack; returns ([0,1] luminance, WeightMaps)."""
    if stack.k < 1:
        raise ValueError("cannot fuse an empty stack")
    weights, fused = fuse_weights_core(stack.images, model)
    # convexity holds mathematically; clipping only absorbs float round-off
    lo = stack.images.min(axis=0)
    hi = stack.images.max(axis=0)
    fused = np.clip(np.asarray(fused, dtype=np.float64), lo, hi)
    return LuminanceMap(fused), WeightMaps(maps=np.asarray(weights, dtype=np.float64))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel centers."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy.reshape(-1, 1) if arr.ndim == 2 else fy.reshape(-1, 1, 1)
    rows = arr[y0] * (1 - fy) + arr[y1] * fy
    fxs = fx.reshape(1, -1) if arr.ndim == 2 else fx.reshape(1, -1, 1)
    return rows[:, x0] * (1 - fxs) + rows[:, x1] * fxs


def resize_short_side(arr: np.ndarray, target: int) -> np.ndarray:
    """Resize so the short side equals ``target``, preserving aspect ratio."""
    h, w = arr.shape[:2]
    if min(h, w) == target:
        return np.asarray(arr, dtype=np.float64)
    scale = target / min(h, w)
    if h <= w:
        out_h, out_w = target, max(1, round(w * scale))
    else:
        out_h, out_w = max(1, round(h * scale)), target
    return resize_bilinear(arr, out_h, out_w)


def full_pipeline(hdr: HdrImage, tmodel: ToneMapModel, fmodel: FusionModel,
                  k: int = 5, rho: float = 0.6, s_range=DEFAULT_SMAX_RANGE,
                  short_side: int = 512) -> LdrImage:
    """Uncalibrated HDR in, display-encoded color LDR out.

    Resize (short side to ``short_side``), tone-map a K-exposure stack,
    fuse, re-inject color, then gamma-encode for an 8-bit display.
    """
    rgb = resize_short_side(hdr.rgb, short_side)
    resized = HdrImage(rgb=np.clip(rgb, 0.0, None), units_calibrated=hdr.units_calibrated)
    lum = extract_luminance(resized)
    stack = generate_stack(lum, tmodel, k=k, s_range=s_range)
    fused01, _ = fuse_stack(stack, fmodel)
    color = color_reproduce(resized, lum, fused01, rho=rho)
    return LdrImage(values=np.power(color.values, 1.0 / 2.2))


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def save_tonemap_model(path, model: ToneMapModel, meta: dict | None = None) -> None:
    info = {"levels": model.levels, "i_min": model.i_min, "i_max": model.i_max}
    info.update(meta or {})
    save_checkpoint(path, "tonemap",
                    [("band", model.band_cfg, model.band),
                     ("low", model.low_cfg, model.low)], meta=info)


def load_tonemap_model(path) -> ToneMapModel:
    _, nets, meta = load_checkpoint(path, expect_kind="tonemap")
    try:
        band_cfg, band = nets["band"]
        low_cfg, low = nets["low"]
    except KeyError as exc:
        raise CheckpointError(f"{path} does not hold a tone-mapping model") from exc
    return ToneMapModel(band=band, low=low, levels=int(meta.get("levels", 5)),
                        i_min=float(meta.get("i_min", DISPLAY_MIN)),
                        i_max=float(meta.get("i_max", DISPLAY_MAX)),
                        band_cfg=band_cfg, low_cfg=low_cfg)


def save_fusion_model(path, model: FusionModel, meta: dict | None = None) -> None:
    save_checkpoint(path, "fusion", [("fusion", model.cfg, model.params)], meta=meta or {})


def load_fusion_model(path) -> FusionModel:
    _, nets, _ = load_checkpoint(path, expect_kind="fusion")
    try:
        cfg, params = nets["fusion"]
    except KeyError as exc:
        raise CheckpointError(f"{path} does not hold a fusion model") from exc
    return FusionModel(params=params, cfg=cfg)
