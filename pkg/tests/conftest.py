import numpy as np
import pytest


def synth_luminance(rng, h, w, dynamic_range=1e3):
    """Random positive scene: smooth ramp + highlights + mild texture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    a, b, phase = rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 2 * np.pi)
    base = 1.0 + 0.8 * np.sin(a * np.pi * xx + phase) * np.cos(b * np.pi * yy)
    img = 0.2 + base
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, 2)
        sig = rng.uniform(0.05, 0.25)
        amp = rng.uniform(2.0, dynamic_range)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    img = img * (1.0 + 0.05 * rng.standard_normal((h, w)))
    return np.clip(img, 1e-3, None)


def synth_rgb(rng, h, w, dynamic_range=1e3):
    """Random positive HDR RGB raster with correlated but distinct channels."""
    lum = synth_luminance(rng, h, w, dynamic_range)
    tint = rng.uniform(0.4, 1.0, size=3)
    wobble = 1.0 + 0.2 * rng.standard_normal((h, w, 3))
    return np.clip(lum[:, :, None] * tint * wobble, 1e-4, None)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def make_lum():
    def factory(seed, h, w, dynamic_range=1e3):
        return synth_luminance(np.random.default_rng(seed), h, w, dynamic_range)

    return factory


@pytest.fixture
def make_rgb():
    def factory(seed, h, w, dynamic_range=1e3):
        return synth_rgb(np.random.default_rng(seed), h, w, dynamic_range)

    return factory
