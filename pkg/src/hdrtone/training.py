"""Sequential desk-scale training: tone-mapping stage, then fusion stage.

Stage one minimizes NLPD between randomly calibrated HDR crops and the
network's display-luminance output; stage two freezes the tone-mapping
model, generates pseudo-multi-exposure stacks, and maximizes the
median-contrast MEF-SSIM variant of the fused image. All randomness
flows from named substreams of one seed, so fixed seeds reproduce
traces and checkpoints bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateImageError, TrainingDivergedError
from .io import LuminanceMap, calibrate, decode_hdr, extract_luminance
from .metrics import ExposureStack, MefSsimConfig, mef_ssim_score_op, mef_ssim_variant, nlpd, nlpd_terms
from .neural import engine
from .neural.can import CanParams
from .neural.engine import Tensor
from .neural.optim import AdamState, adam_step
from .tonemap import (
    FusionModel,
    ToneMapModel,
    from_unit_range,
    fuse_stack,
    fuse_weights_core,
    generate_stack,
    tone_map_core,
    _params_triple,
)

HDR_SUFFIXES = (".hdr", ".pfm")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by both stages; desk-scale defaults."""

    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_interval: int = 200
    epochs: int = 200
    batch_size: int = 4  # the fusion stage always uses one stack per step
    crop_size: int = 128
    seed: int = 0
    smax_choices: tuple[float, ...] = (1e3, 1e4, 1e5, 1e6, 1e7)
    s_min: float = 5.0
    levels: int = 5
    stack_size: int = 5

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.decay_interval < 1 or not (0 < self.lr_decay <= 1):
            raise ValueError("bad learning-rate schedule")
        if tuple(sorted(self.smax_choices)) != tuple(self.smax_choices):
            raise ValueError("smax_choices must be sorted ascending")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch; decays every decay_interval."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_interval)


_CONFIG_COERCERS = {
    "lr": float, "lr_decay": float, "decay_interval": int, "epochs": int,
    "batch_size": int, "crop_size": int, "seed": int, "s_min": float,
    "levels": int, "stack_size": int,
    "smax_choices": lambda s: tuple(float(v) for v in str(s).split(",") if v.strip()),
}


def parse_config_text(text: str) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno} is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_COERCERS:
            raise ValueError(f"unknown config key {key!r} on line {lineno}")
        out[key] = _CONFIG_COERCERS[key](value)
    return out


def make_train_config(*layers: dict) -> TrainConfig:
    """Merge defaults <- config file <- CLI flags (later layers win)."""
    merged: dict = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    return TrainConfig(**merged)


@dataclass
class Corpus:
    """Train/test partition of HDR image paths."""

    train: list[Path]
    test: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self.train = [Path(p) for p in self.train]
        self.test = [Path(p) for p in self.test]
        if not self.train:
            raise ValueError("corpus has no training images")
        if set(self.train) & set(self.test):
            raise ValueError("train/test splits must be disjoint")


def corpus_from_dir(directory) -> Corpus:
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in HDR_SUFFIXES and p.is_file())
    if not paths:
        raise ValueError(f"no HDR images (.hdr/.pfm) found in {directory}")
    return Corpus(train=paths)


def load_luminance(path) -> np.ndarray:
    return extract_luminance(decode_hdr(Path(path).read_bytes())).lum


def _resolve_images(source) -> list[np.ndarray]:
    if isinstance(source, Corpus):
        return [load_luminance(p) for p in source.train]
    images = [np.asarray(img, dtype=np.float64) for img in source]
    if not images:
        raise ValueError("no training images supplied")
    return images


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    split: str
    metric: str
    value: float
    lr: float


def write_trace_csv(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "metric", "value", "lr"])
        for row in rows:
            writer.writerow([row.epoch, row.split, row.metric,
                             f"{row.value:.10g}", f"{row.lr:.10g}"])


def _substreams(seed: int, names: tuple[str, ...]) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(seq) for name, seq in zip(names, children)}


def _random_crop(img: np.ndarray, size: int, rng: np.random.Generator):
    h, w = img.shape
    ch, cw = min(size, h), min(size, w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return img[y0:y0 + ch, x0:x0 + cw], (y0, x0, ch, cw)


def _named_grads(prefix: str, params: CanParams, triple) -> dict[str, np.ndarray]:
    w_t, b_t, an_t = triple
    grads = {}
    for i in range(len(params.weights)):
        grads[f"{prefix}.layer{i}.weight"] = _grad_or_zeros(w_t[i])
        if params.biases[i] is not None:
            grads[f"{prefix}.layer{i}.bias"] = _grad_or_zeros(b_t[i])
        if params.an[i] is not None:
            grads[f"{prefix}.layer{i}.an"] = _grad_or_zeros(an_t[i])
    return grads


def _grad_or_zeros(tensor: Tensor) -> np.ndarray:
    return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)


def _tensor_triple(params: CanParams):
    return _params_triple(params, True)


def train_tonemap(source, cfg: TrainConfig = TrainConfig()):
    """Minimize NLPD over randomly cropped, flipped, recalibrated scenes.

    Returns (ToneMapModel, trace rows). Raises TrainingDivergedError on a
    non-finite loss.
    """
    images = _resolve_images(source)
    streams = _substreams(cfg.seed, ("init_band", "init_low", "order", "crop", "flip", "smax"))
    model = ToneMapModel(
        band=_init_for(streams["init_band"]),
        low=_init_for(streams["init_low"]),
        levels=cfg.levels)
    params = {f"band.{n}": a for n, a in model.band.named_arrays()}
    params.update({f"low.{n}": a for n, a in model.low.named_arrays()})
    state = AdamState()
    trace: list[TraceRow] = []
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = streams["order"].permutation(n)
        losses = []
        for step in range(steps_per_epoch):
            idxs = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            if len(idxs) == 0:
                continue
            batch = [_augmented_calibrated_crop(images[i], cfg, streams) for i in idxs]
            target = np.stack(batch).astype(np.float32)
            band_t = _tensor_triple(model.band)
            low_t = _tensor_triple(model.low)
            display = tone_map_core(target, model, band_p=band_t, low_p=low_t)
            loss = engine.mean(nlpd_terms(target, display))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite NLPD at epoch {epoch} step {step + 1}")
            loss.backward()
            grads = _named_grads("band", model.band, band_t)
            grads.update(_named_grads("low", model.low, low_t))
            adam_step(params, grads, state, lr)
            losses.append(value)
        trace.append(TraceRow(epoch, "train", "nlpd", float(np.mean(losses)), lr))
    return model, trace


def _init_for(rng: np.random.Generator) -> CanParams:
    from .neural.can import CanConfig, init_can_params

    return init_can_params(CanConfig.tone_mapping(), rng)


def _augmented_calibrated_crop(img: np.ndarray, cfg: TrainConfig, streams) -> np.ndarray:
    for _ in range(20):
        crop, _ = _random_crop(img, cfg.crop_size, streams["crop"])
        if streams["flip"].random() < 0.5:
            crop = crop[:, ::-1]
        smax = float(streams["smax"].choice(np.asarray(cfg.smax_choices)))
        try:
            return calibrate(LuminanceMap(crop), cfg.s_min, smax).lum
        except DegenerateImageError:
            continue
    raise DegenerateImageError("could not draw a non-constant training crop")


def train_fusion(source, tmodel: ToneMapModel, cfg: TrainConfig = TrainConfig(),
                 mef_cfg: MefSsimConfig = MefSsimConfig()):
    """Maximize the MEF-SSIM variant of fused stacks (tone mapper frozen).

    Returns (FusionModel, trace rows).
    """
    images = _resolve_images(source)
    streams = _substreams(cfg.seed, ("init_fusion", "order", "crop", "flip"))
    from .neural.can import CanConfig, init_can_params

    fmodel = FusionModel(params=init_can_params(CanConfig.fusion(), streams["init_fusion"]))
    s_range = (cfg.smax_choices[0], cfg.smax_choices[-1])
    stacks = [generate_stack(img, tmodel, k=cfg.stack_size, s_range=s_range,
                             s_min=cfg.s_min) for img in images]
    params = {f"fusion.{n}": a for n, a in fmodel.params.named_arrays()}
    state = AdamState()
    trace: list[TraceRow] = []
    n = len(images)
    crop_floor = mef_cfg.window

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = streams["order"].permutation(n)
        scores = []
        for idx in order:
            stack = stacks[idx]
            imgs = stack.images
            size = max(crop_floor, cfg.crop_size)
            crop0, (y0, x0, ch, cw) = _random_crop(imgs[0], size, streams["crop"])
            window = imgs[:, y0:y0 + ch, x0:x0 + cw]
            if streams["flip"].random() < 0.5:
                window = window[:, :, ::-1]
            sub = ExposureStack(images=window, max_luminances=stack.max_luminances)
            triple = _tensor_triple(fmodel.params)
            _, fused = fuse_weights_core(sub.images, fmodel, params=triple)
            score = mef_ssim_score_op(sub, fused, mef_cfg)
            value = float(score.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite MEF-SSIM at epoch {epoch}")
            loss = 1.0 - score
            loss.backward()
            adam_step(params, _named_grads("fusion", fmodel.params, triple), state, lr)
            scores.append(value)
        trace.append(TraceRow(epoch, "train", "mefssim", float(np.mean(scores)), lr))
    return fmodel, trace


@dataclass(frozen=True)
class EvalRow:
    image_id: str
    nlpd_ref: float  # against the S_max = 1e5 calibration
    nlpd_best: float  # best over the five calibrations
    mef_ssim: float  # fused output against its own stack


def evaluate(source, tmodel: ToneMapModel, fmodel: FusionModel,
             cfg: TrainConfig = TrainConfig(), ids: list[str] | None = None) -> list[EvalRow]:
    """Deterministic per-image report over a corpus split."""
    if isinstance(source, Corpus):
        ids = ids or [str(p) for p in source.train]
        images = _resolve_images(source)
    else:
        images = _resolve_images(source)
        ids = ids or [f"image{i}" for i in range(len(images))]
    s_range = (cfg.smax_choices[0], cfg.smax_choices[-1])
    rows = []
    for image_id, img in zip(ids, images):
        stack = generate_stack(img, tmodel, k=cfg.stack_size, s_range=s_range, s_min=cfg.s_min)
        fused01, _ = fuse_stack(stack, fmodel)
        display = from_unit_range(fused01.lum, tmodel.i_min, tmodel.i_max)
        lum = LuminanceMap(img)
        per_smax = [nlpd(calibrate(lum, cfg.s_min, smax).lum, display)
                    for smax in cfg.smax_choices]
        ref = nlpd(calibrate(lum, cfg.s_min, 1e5).lum, display)
        rows.append(EvalRow(image_id=image_id, nlpd_ref=ref,
                            nlpd_best=float(min(per_smax)),
                            mef_ssim=mef_ssim_variant(stack, fused01)))
    return rows
