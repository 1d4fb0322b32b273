"""Iterative reference tone mapper: NLPD minimized directly in image space.

Projected gradient descent over the displayable range with halve-on-
non-decrease backtracking. Given enough iterations this bounds what any
tone mapper can achieve under the same metric, so it doubles as the
oracle the learned model is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateImageError
from .io import LuminanceMap
from .metrics import NlpdConfig, nlpd, nlpd_gradient
from .tonemap import DISPLAY_MAX, DISPLAY_MIN


@dataclass(frozen=True)
class OptConfig:
    """Iteration budget, initial step, and stopping tolerance."""

    max_iters: int = 500
    step_size: float | None = None  # None: scaled from the first gradient
    tol: float = 1e-6
    i_min: float = DISPLAY_MIN
    i_max: float = DISPLAY_MAX
    nlpd: NlpdConfig = NlpdConfig()

    def __post_init__(self):
        if self.max_iters < 0 or self.tol < 0:
            raise ValueError("max_iters and tol must be nonnegative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")


def nlpd_opt(s, cfg: OptConfig = OptConfig()):
    """Minimize nlpd(s, I) over I in [i_min, i_max]; returns (I, loss trace).

    The trace is non-increasing by construction: a step is only accepted
    after backtracking finds a non-worse candidate.
    """
    arr = s.lum if isinstance(s, LuminanceMap) else np.asarray(s, dtype=np.float64)
    if arr.min() <= 0:
        raise ValueError("calibrated luminance must be strictly positive")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        raise DegenerateImageError("constant image cannot be tone mapped")
    # start from the input squeezed affinely into the display range
    current = cfg.i_min + (cfg.i_max - cfg.i_min) * (arr - lo) / (hi - lo)
    loss = nlpd(arr, current, cfg.nlpd)
    trace = [loss]
    step = cfg.step_size
    for _ in range(cfg.max_iters):
        grad = nlpd_gradient(arr, current, cfg.nlpd)
        gmax = float(np.abs(grad).max())
        if gmax == 0.0:
            break
        if step is None:
            # first trial moves the worst pixel ~10% of the display range
            step = 0.1 * (cfg.i_max - cfg.i_min) / gmax
        candidate = np.clip(current - step * grad, cfg.i_min, cfg.i_max)
        cand_loss = nlpd(arr, candidate, cfg.nlpd)
        while cand_loss > loss and step > 1e-12:
            step *= 0.5
            candidate = np.clip(current - step * grad, cfg.i_min, cfg.i_max)
            cand_loss = nlpd(arr, candidate, cfg.nlpd)
        if cand_loss > loss:
            break
        prev = loss
        current, loss = candidate, cand_loss
        trace.append(loss)
        if prev - loss <= cfg.tol * max(prev, 1e-30):
            break
        # backtracking keeps the trace monotone, so the step may regrow freely
        step *= 2.0
    return LuminanceMap(current, calibrated=True), trace
