"""Perceptually optimized HDR tone mapping.

Two-stage pipeline: a tone-mapping network operating on normalized
Laplacian pyramids (trained against NLPD) followed by pseudo-multi-
exposure fusion (trained against a median-contrast MEF-SSIM variant),
plus the iterative NLPD minimizer used as a reference method.
"""

from .errors import (
    CheckpointError,
    DegenerateImageError,
    DimensionMismatchError,
    FormatError,
    HdrToneError,
    TrainingDivergedError,
)
from .io import (
    HdrImage,
    LdrImage,
    LuminanceMap,
    calibrate,
    color_reproduce,
    decode_hdr,
    extract_luminance,
    load_pfm,
    load_png,
    load_radiance_hdr,
    save_pfm,
    save_png,
    save_radiance_hdr,
)

__version__ = "0.1.0"

__all__ = [
    "HdrImage",
    "LdrImage",
    "LuminanceMap",
    "calibrate",
    "color_reproduce",
    "decode_hdr",
    "extract_luminance",
    "load_pfm",
    "load_png",
    "load_radiance_hdr",
    "save_pfm",
    "save_png",
    "save_radiance_hdr",
    "HdrToneError",
    "FormatError",
    "DegenerateImageError",
    "DimensionMismatchError",
    "CheckpointError",
    "TrainingDivergedError",
    "__version__",
]
