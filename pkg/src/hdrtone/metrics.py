"""Perceptual objectives: NLPD and a median-contrast MEF-SSIM variant.

NLPD compares the normalized Laplacian pyramids of two luminance images
through nested power means; it is the training loss of the tone-mapping
network and the objective of the iterative reference method. The
MEF-SSIM variant scores a fused image against a per-window "desired"
patch assembled from an exposure stack; its structure component comes
from the *median*-contrast exposure, which keeps amplified sensor noise
out of the target. Both metrics expose exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import pyramid
from .errors import DimensionMismatchError
from .io import LuminanceMap
from .neural import engine
from .neural.engine import Tensor


@dataclass(frozen=True)
class NlpdConfig:
    """Exponents, level count, and normalization constants."""

    gamma: float = 1.0 / 2.6
    alpha: float = 2.0
    beta: float = 0.6
    levels: int = pyramid.DEFAULT_LEVELS
    c0_band: float = pyramid.C0_BANDPASS
    c0_low: float = pyramid.C0_LOWPASS


@dataclass(frozen=True)
class MefSsimConfig:
    """Window geometry, well-exposedness spreads, stability constants."""

    window: int = 8
    stride: int = 1
    sigma_g: float = 0.2
    sigma_l: float = 0.5
    tau: float = 0.5
    c1: float = 0.01**2
    c2: float = 0.03**2
    structure_selector: str = "median"  # "max" reproduces the original rule


@dataclass
class ExposureStack:
    """K tone-mapped luminance images of one scene, values in [0, 1]."""

    images: np.ndarray  # (K, H, W)
    max_luminances: np.ndarray  # (K,) simulated S_max values, cd/m^2

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.max_luminances = np.atleast_1d(np.asarray(self.max_luminances, dtype=np.float64))
        if self.images.ndim != 3 or self.images.shape[0] < 1:
            raise ValueError(f"images must be (K, H, W) with K >= 1, got {self.images.shape}")
        if self.images.shape[0] != self.max_luminances.shape[0]:
            raise ValueError("one max luminance per stack image is required")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("stack images must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:]


def _as_lum(x) -> np.ndarray:
    return x.lum if isinstance(x, LuminanceMap) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# NLPD
# ---------------------------------------------------------------------------


def nlpd_terms(s, i, cfg: NlpdConfig = NlpdConfig()):
    """Shared NLPD computation; works on arrays or engine tensors.

    Operates on the last two axes so a leading batch axis yields one
    distance per image.
    """
    sg = engine.power(s, cfg.gamma)
    ig = engine.power(i, cfg.gamma)
    ys = pyramid.normalize_pyramid(pyramid.build_laplacian(sg, cfg.levels),
                                   cfg.c0_band, cfg.c0_low)
    yi = pyramid.normalize_pyramid(pyramid.build_laplacian(ig, cfg.levels),
                                   cfg.c0_band, cfg.c0_low)
    total = None
    for zs, zi in zip(ys.levels, yi.levels):
        diff = engine.absolute(zs - zi)
        inner = engine.mean(engine.power(diff, cfg.alpha), axis=(-2, -1))
        term = engine.power(inner, cfg.beta / cfg.alpha)
        total = term if total is None else total + term
    return engine.power(total * (1.0 / cfg.levels), 1.0 / cfg.beta)


def _check_nlpd_inputs(s: np.ndarray, i: np.ndarray):
    if s.shape != i.shape:
        raise DimensionMismatchError(f"luminance shapes differ: {s.shape} vs {i.shape}")
    if s.min() <= 0 or i.min() <= 0:
        raise ValueError("NLPD requires strictly positive luminance")


def nlpd(s, i, cfg: NlpdConfig = NlpdConfig()) -> float:
    """Normalized Laplacian pyramid distance between two luminance maps."""
    s, i = _as_lum(s), _as_lum(i)
    _check_nlpd_inputs(s, i)
    return float(nlpd_terms(s, i, cfg))


def nlpd_gradient(s, i, cfg: NlpdConfig = NlpdConfig()) -> np.ndarray:
    """d nlpd / d i, evaluated by reverse mode through the whole metric.

    At the exact minimum (identical inputs) the distance is not smooth;
    the zero raster is returned as the subgradient there.
    """
    s, i = _as_lum(s), _as_lum(i)
    _check_nlpd_inputs(s, i)
    it = Tensor(i, requires_grad=True)
    loss = nlpd_terms(s, it, cfg)
    if float(loss.data) == 0.0:
        return np.zeros_like(i)
    loss.backward()
    return it.grad


# ---------------------------------------------------------------------------
# MEF-SSIM (median-contrast variant)
# ---------------------------------------------------------------------------

_STRUCTURE_NORM_FLOOR = 1e-8
_WEIGHT_SUM_FLOOR = 1e-300


def _window_rows(h: int, window: int, stride: int):
    return range(0, h - window + 1, stride)


def structure_index(contrasts: np.ndarray, selector: str = "median") -> np.ndarray:
    """Per-window index of the exposure whose structure vector is fused.

    ``contrasts`` has the exposure axis first. The median rule takes the
    lower of the two middle order statistics for even K; ties resolve to
    the lower exposure index. The "max" rule is the original MEF-SSIM
    selector, kept as an evaluation-time toggle.
    """
    contrasts = np.asarray(contrasts)
    if selector == "median":
        med = np.sort(contrasts, axis=0)[(contrasts.shape[0] - 1) // 2]
        return (contrasts == med[None]).argmax(axis=0)
    if selector == "max":
        return contrasts.argmax(axis=0)
    raise ValueError(f"unknown structure selector {selector!r}")


def _mef_ssim_impl(stack: np.ndarray, fused: np.ndarray, cfg: MefSsimConfig,
                   want_grad: bool):
    k, h, w = stack.shape
    win = cfg.window
    n = win * win
    g_global = stack.mean(axis=(1, 2))  # per-exposure global mean intensity
    wg = np.exp(-((g_global - cfg.tau) ** 2) / (2 * cfg.sigma_g**2))  # (K,)

    if cfg.structure_selector not in ("median", "max"):
        raise ValueError(f"unknown structure selector {cfg.structure_selector!r}")

    grad = np.zeros_like(fused) if want_grad else None
    score_sum = 0.0
    n_windows = 0
    # process stripes of window rows to bound the unfolded working set
    stripe = max(1, int(2**22 // max(1, k * (w - win + 1) * n)))
    row_positions = list(_window_rows(h, win, cfg.stride))
    for s0 in range(0, len(row_positions), stripe):
        rows = row_positions[s0:s0 + stripe]
        y0, y1 = rows[0], rows[-1] + win
        rel = [r - y0 for r in rows]
        sw = sliding_window_view(stack[:, y0:y1, :], (win, win), axis=(1, 2))
        sw = sw[:, rel][:, :, ::cfg.stride]
        _, nr, nc = sw.shape[:3]
        m = nr * nc
        patches = sw.reshape(k, m, n)

        mu = patches.mean(axis=2)  # (K, m)
        centered = patches - mu[:, :, None]
        contrast = np.sqrt(np.einsum("kmn,kmn->km", centered, centered))  # (K, m)

        sel = structure_index(contrast, cfg.structure_selector)
        take = sel[None, :, None]
        x_sel = np.take_along_axis(centered, take, axis=0)[0]  # (m, n)
        c_sel = np.take_along_axis(contrast, sel[None, :], axis=0)[0]  # (m,)
        live = c_sel >= _STRUCTURE_NORM_FLOOR
        s_hat = np.where(live[:, None], x_sel, 0.0)
        np.divide(s_hat, c_sel[:, None], out=s_hat, where=live[:, None])
        s_hat_norm_sq = live.astype(np.float64)  # ||s_hat||^2 is 0 or 1

        c_hat = contrast.max(axis=0)  # (m,)

        wl = wg[:, None] * np.exp(-((mu - cfg.tau) ** 2) / (2 * cfg.sigma_l**2))
        denom = wl.sum(axis=0)
        ok = denom > _WEIGHT_SUM_FLOOR
        l_hat = np.where(ok, (wl * mu).sum(axis=0) / np.where(ok, denom, 1.0),
                         mu.mean(axis=0))

        fw = sliding_window_view(fused[y0:y1, :], (win, win), axis=(0, 1))
        fw = fw[rel][:, ::cfg.stride]
        f_patches = fw.reshape(m, n)
        mu_f = f_patches.mean(axis=1)
        f_centered = f_patches - mu_f[:, None]
        var_f = np.einsum("mn,mn->m", f_centered, f_centered) / n
        dot = np.einsum("mn,mn->m", s_hat, f_patches)
        sigma_xf = c_hat * dot / n

        mu_x = l_hat
        var_x = c_hat * c_hat * s_hat_norm_sq / n

        a1 = 2 * mu_x * mu_f + cfg.c1
        a2 = 2 * sigma_xf + cfg.c2
        b1 = mu_x * mu_x + mu_f * mu_f + cfg.c1
        b2 = var_x + var_f + cfg.c2
        q = (a1 * a2) / (b1 * b2)
        score_sum += q.sum()
        n_windows += m

        if want_grad:
            dq_dmuf = (2 * mu_x * a2) / (b1 * b2) - q * (2 * mu_f) / b1
            dq_dsxf = 2 * a1 / (b1 * b2)
            dq_dvarf = -q / b2
            gwin = (dq_dmuf[:, None] / n
                    + (dq_dsxf * c_hat)[:, None] * s_hat / n
                    + dq_dvarf[:, None] * 2.0 * f_centered / n)
            gwin = gwin.reshape(nr, nc, win, win)
            st = cfg.stride
            for dy in range(win):
                for dx in range(win):
                    grad[y0 + dy:y0 + dy + nr * st:st, dx:dx + nc * st:st] \
                        += gwin[:, :, dy, dx]

    score = score_sum / n_windows
    if want_grad:
        grad /= n_windows
    return score, grad


def _check_mef_inputs(stack: ExposureStack, fused: np.ndarray, cfg: MefSsimConfig):
    if fused.shape != stack.shape:
        raise DimensionMismatchError(
            f"fused shape {fused.shape} does not match stack {stack.shape}")
    if cfg.window > min(fused.shape):
        raise ValueError(f"window {cfg.window} exceeds image size {fused.shape}")


def mef_ssim_variant(stack: ExposureStack, fused, cfg: MefSsimConfig = MefSsimConfig()) -> float:
    """Mean SSIM-style quality of ``fused`` against the stack's desired patches."""
    fused = _as_lum(fused)
    _check_mef_inputs(stack, fused, cfg)
    score, _ = _mef_ssim_impl(stack.images, fused, cfg, want_grad=False)
    return float(score)


def mef_ssim_gradient(stack: ExposureStack, fused,
                      cfg: MefSsimConfig = MefSsimConfig()) -> np.ndarray:
    """d score / d fused; the desired-patch construction is a constant."""
    fused = _as_lum(fused)
    _check_mef_inputs(stack, fused, cfg)
    _, grad = _mef_ssim_impl(stack.images, fused, cfg, want_grad=True)
    return grad


def mef_ssim_score_op(stack: ExposureStack, fused: Tensor,
                      cfg: MefSsimConfig = MefSsimConfig()) -> Tensor:
    """Engine node for training: scalar score with the hand-derived backward."""
    fused_data = np.asarray(fused.data, dtype=np.float64)
    _check_mef_inputs(stack, fused_data, cfg)
    score, grad = _mef_ssim_impl(stack.images, fused_data, cfg, want_grad=True)
    out = Tensor(np.asarray(score), parents=(fused,))
    out._backward = lambda g: fused._accum(np.asarray(g) * grad.astype(fused.data.dtype))
    return out
