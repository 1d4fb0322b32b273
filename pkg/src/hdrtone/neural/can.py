"""The two context-aggregation networks (CANs) and their building blocks.

Dilated 3x3 convolutions at constant resolution, a learned mix of the
identity and a batch-normalized signal ("adaptive normalization"), and a
leaky rectifier. The tone-mapping CAN carries no additive constants
anywhere, so with the identity-start normalization it is positively
scale-invariant: g(a*x) = a*g(x) for a > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor, conv2d_dilated

# LReLU negative slope; fixed during training, not a parameter.
LRELU_SLOPE = 0.2
AN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    dilation: int
    width: int
    bias: bool
    adaptive_norm: bool
    lrelu: bool


@dataclass(frozen=True)
class CanConfig:
    """Layer list plus the input channel count."""

    layers: tuple[LayerSpec, ...]
    in_channels: int = 1

    @staticmethod
    def tone_mapping() -> "CanConfig":
        """Six 3x3 layers, dilations 1,2,4,8,1,1, width 32 (head 1), no biases."""
        dilations = (1, 2, 4, 8, 1, 1)
        layers = tuple(
            LayerSpec(kernel=3, dilation=d, width=32 if i < 5 else 1,
                      bias=False, adaptive_norm=i < 5, lrelu=i < 5)
            for i, d in enumerate(dilations)
        )
        return CanConfig(layers=layers, in_channels=1)

    @staticmethod
    def fusion() -> "CanConfig":
        """Four layers, dilations 1,2,4,1, width 24 (1x1 head), bias on the head only."""
        layers = (
            LayerSpec(kernel=3, dilation=1, width=24, bias=False, adaptive_norm=True, lrelu=True),
            LayerSpec(kernel=3, dilation=2, width=24, bias=False, adaptive_norm=True, lrelu=True),
            LayerSpec(kernel=3, dilation=4, width=24, bias=False, adaptive_norm=True, lrelu=True),
            LayerSpec(kernel=1, dilation=1, width=1, bias=True, adaptive_norm=False, lrelu=False),
        )
        return CanConfig(layers=layers, in_channels=1)

    def layer_in_channels(self, i: int) -> int:
        return self.in_channels if i == 0 else self.layers[i - 1].width


@dataclass
class CanParams:
    """Per-layer conv weights, optional biases, and (lambda1, lambda2) pairs."""

    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    an: list[np.ndarray | None]  # shape (2,) where adaptive_norm is on

    def named_arrays(self):
        for i, w in enumerate(self.weights):
            yield f"layer{i}.weight", w
            if self.biases[i] is not None:
                yield f"layer{i}.bias", self.biases[i]
            if self.an[i] is not None:
                yield f"layer{i}.an", self.an[i]

    def copy(self) -> "CanParams":
        return CanParams(
            weights=[w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
            an=[None if a is None else a.copy() for a in self.an],
        )


def init_can_params(cfg: CanConfig, rng: np.random.Generator,
                    dtype=np.float32) -> CanParams:
    """Uniform(-b, b) weights with b = sqrt(1/fan_in); AN starts as identity."""
    weights, biases, ans = [], [], []
    for i, spec in enumerate(cfg.layers):
        cin = cfg.layer_in_channels(i)
        fan_in = cin * spec.kernel * spec.kernel
        bound = float(np.sqrt(1.0 / fan_in))
        w = rng.uniform(-bound, bound, size=(spec.width, cin, spec.kernel, spec.kernel))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(spec.width, dtype) if spec.bias else None)
        ans.append(np.array([1.0, 0.0], dtype) if spec.adaptive_norm else None)
    return CanParams(weights=weights, biases=biases, an=ans)


def adaptive_norm(x, lam1, lam2, eps: float = AN_EPS):
    """lambda1 * Z + lambda2 * BN(Z) with per-channel statistics.

    BN(Z) = (Z - mu) / sqrt(var + eps), mu/var taken per channel over
    the batch and spatial axes of the current input (no running
    averages, no learned shift or scale). A constant channel has a zero
    BN term, leaving lambda1 * Z.
    """
    axes = (0, 2, 3)
    mu = engine.mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = engine.mean(centered * centered, axis=axes, keepdims=True)
    bn = centered / engine.power(var + eps, 0.5)
    return lam1 * x + lam2 * bn


def lrelu(x):
    """max(0.2 z, z) elementwise."""
    return engine.leaky_relu(x, LRELU_SLOPE)


def _fused_epilogue(y: np.ndarray, spec: LayerSpec, an: np.ndarray | None,
                    conv_stats: dict | None = None) -> np.ndarray:
    """In-place AN + LReLU on a freshly produced conv output.

    With fixed statistics AN collapses to a per-channel affine map
    A*Z + B, so the whole epilogue costs at most a stats pass plus one
    transform pass; the stats pass drops out when the convolution
    already accumulated channel sums.
    """
    fast = (engine._kernels is not None and y.dtype == np.float32
            and y.flags.c_contiguous)
    n, c = y.shape[:2]
    count = n * y.shape[2] * y.shape[3]
    flat = y.reshape(n, c, -1) if fast else None
    if spec.adaptive_norm:
        lam1, lam2 = float(an[0]), float(an[1])
        if conv_stats:
            mu = conv_stats["sum"] / count
            m2 = conv_stats["sum_sq"] / count
        elif fast:
            total = np.empty(c, np.float64)
            total_sq = np.empty(c, np.float64)
            engine._kernels.channel_stats(flat, total, total_sq)
            mu = total / count
            m2 = total_sq / count
        else:
            mu = y.mean(axis=(0, 2, 3), dtype=np.float64)
            m2 = np.einsum("nchw,nchw->c", y, y, dtype=np.float64) / count
        denom = np.sqrt(np.maximum(m2 - mu * mu, 0.0) + AN_EPS)
        scale = (lam1 + lam2 / denom).astype(y.dtype)
        shift = (-lam2 * mu / denom).astype(y.dtype)
        if fast:
            engine._kernels.affine_lrelu(flat, scale, shift, LRELU_SLOPE, spec.lrelu)
            return y
        y *= scale[None, :, None, None]
        y += shift[None, :, None, None]
    if spec.lrelu:
        if fast:
            engine._kernels.affine_lrelu(flat, np.ones(c, np.float32),
                                         np.zeros(c, np.float32), LRELU_SLOPE, True)
            return y
        neg = y * np.asarray(LRELU_SLOPE, dtype=y.dtype)
        np.maximum(y, neg, out=y)
    return y


def _run_layers(x, cfg: CanConfig, weights, biases, ans):
    traced = isinstance(x, Tensor) or any(isinstance(w, Tensor) for w in weights)
    for i, spec in enumerate(cfg.layers):
        b = biases[i] if spec.bias else None
        if traced:
            x = conv2d_dilated(x, weights[i], dilation=spec.dilation, bias=b)
            if spec.adaptive_norm:
                lam = ans[i]
                x = adaptive_norm(x, lam[0], lam[1])
            if spec.lrelu:
                x = lrelu(x)
        else:
            # conv-accumulated stats are pre-bias, so only reuse them when
            # the layer is bias-free (Table 1/2 AN layers always are)
            stats = {} if spec.adaptive_norm and not spec.bias else None
            x = conv2d_dilated(x, weights[i], dilation=spec.dilation, bias=b,
                               _stats=stats)
            x = _fused_epilogue(x, spec, ans[i], conv_stats=stats)
    return x


def can_infer(x: np.ndarray, cfg: CanConfig, params: CanParams) -> np.ndarray:
    """Forward pass on plain arrays (no gradient tape)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    return _run_layers(x, cfg, params.weights, params.biases, params.an)


@dataclass
class CanForwardState:
    """Recorded forward pass; feeds :func:`can_backward`."""

    x: Tensor
    weights: list[Tensor]
    biases: list[Tensor | None]
    an: list[Tensor | None]
    out: Tensor
    cfg: CanConfig = field(repr=False, default=None)


def can_forward(x: np.ndarray, cfg: CanConfig, params: CanParams):
    """Recorded forward pass; returns (output tensor, saved state)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    xt = Tensor(x, requires_grad=True)
    wt = [Tensor(w, requires_grad=True) for w in params.weights]
    bt = [None if b is None else Tensor(b, requires_grad=True) for b in params.biases]
    at = [None if a is None else Tensor(a, requires_grad=True) for a in params.an]
    out = _run_layers(xt, cfg, wt, bt, at)
    return out, CanForwardState(x=xt, weights=wt, biases=bt, an=at, out=out, cfg=cfg)


def can_backward(grad_out: np.ndarray, state: CanForwardState):
    """Exact reverse-mode gradients for the recorded pass.

    Returns (grad wrt input, CanParams-shaped parameter gradients).
    """
    state.out.backward(np.asarray(grad_out, dtype=state.out.data.dtype))

    def grad_of(t, like):
        if t is None:
            return None
        return t.grad if t.grad is not None else np.zeros_like(like)

    grads = CanParams(
        weights=[grad_of(t, t.data) for t in state.weights],
        biases=[grad_of(t, None if t is None else t.data) for t in state.biases],
        an=[grad_of(t, None if t is None else t.data) for t in state.an],
    )
    gx = state.x.grad if state.x.grad is not None else np.zeros_like(state.x.data)
    return gx, grads
