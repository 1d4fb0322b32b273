"""HDR/LDR image I/O, luminance handling, and color reproduction.

Readers accept ``bytes`` and return in-memory images; writers return
``bytes``. Radiance RGBE and PFM are decoded by hand, PNG goes through
Pillow. All functions are pure.
"""

from __future__ import annotations

import io as _stdio
import math
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DegenerateImageError, FormatError

# Rec. 709 linear-light luminance weights.
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


@dataclass
class HdrImage:
    """Linear-radiance RGB raster, arbitrary units until calibrated."""

    rgb: np.ndarray  # (H, W, 3) float, >= 0
    units_calibrated: bool = False

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.rgb.shape[0] < 1 or self.rgb.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("rgb values must be finite")
        if np.any(self.rgb < 0):
            raise ValueError("rgb values must be nonnegative")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class LdrImage:
    """Display-referred image with every value in [0, 1]; gray or RGB."""

    values: np.ndarray  # (H, W) or (H, W, 3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (2, 3):
            raise ValueError(f"values must be 2-D or (H, W, 3), got {self.values.shape}")
        if self.values.ndim == 3 and self.values.shape[2] != 3:
            raise ValueError("color images must have exactly 3 channels")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class LuminanceMap:
    """Single-channel luminance raster, physical (cd/m^2) once calibrated."""

    lum: np.ndarray  # (H, W) float, >= 0
    calibrated: bool = False

    def __post_init__(self):
        self.lum = np.asarray(self.lum, dtype=np.float64)
        if self.lum.ndim != 2:
            raise ValueError(f"lum must be 2-D, got {self.lum.shape}")
        if not np.all(np.isfinite(self.lum)):
            raise ValueError("luminance must be finite")
        if np.any(self.lum < 0):
            raise ValueError("luminance must be nonnegative")

    @property
    def height(self) -> int:
        return self.lum.shape[0]

    @property
    def width(self) -> int:
        return self.lum.shape[1]


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr)
# ---------------------------------------------------------------------------

_RES_RE = re.compile(rb"^-Y (\d+) \+X (\d+)$")


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Decode (..., 4) uint8 RGBE to (..., 3) linear float RGB."""
    rgbe = rgbe.astype(np.float64)
    e = rgbe[..., 3]
    scale = np.where(e > 0, np.exp2(e - 136.0), 0.0)
    return np.where(e[..., None] > 0, (rgbe[..., :3] + 0.5) * scale[..., None], 0.0)


def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    """Encode (..., 3) nonnegative float RGB to (..., 4) uint8 RGBE."""
    v = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = v >= 1e-32
    if np.any(live):
        # frexp: v = m * 2**e with m in [0.5, 1)
        m, e = np.frexp(v[live])
        scale = m * 256.0 / v[live]
        mant = np.floor(rgb[live] * scale[..., None]).clip(0, 255)
        out[live, :3] = mant.astype(np.uint8)
        out[live, 3] = (e + 128).astype(np.uint8)
    return out


def load_radiance_hdr(data: bytes) -> HdrImage:
    """Decode a Radiance RGBE stream (flat or new-style RLE scanlines).

    Raises
    ------
    FormatError
        On a malformed header, unsupported FORMAT, or truncated payload.
    """
    buf = _stdio.BytesIO(data)
    magic = buf.readline().rstrip(b"\r\n")
    if magic not in (b"#?RADIANCE", b"#?RGBE"):
        raise FormatError("not a Radiance file: missing #?RADIANCE/#?RGBE magic")
    fmt = None
    while True:
        line = buf.readline()
        if line == b"":
            raise FormatError("truncated header: no blank line before resolution")
        line = line.rstrip(b"\r\n")
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            fmt = line[len(b"FORMAT="):]
    if fmt is None:
        raise FormatError("header declares no FORMAT")
    if fmt != b"32-bit_rle_rgbe":
        raise FormatError(f"unsupported FORMAT {fmt.decode('ascii', 'replace')!r}")
    res = buf.readline().rstrip(b"\r\n")
    m = _RES_RE.match(res)
    if not m:
        raise FormatError(f"unsupported resolution string {res.decode('ascii', 'replace')!r}")
    h, w = int(m.group(1)), int(m.group(2))
    if h < 1 or w < 1 or h * w > 2**28:
        raise FormatError("bad image dimensions")

    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        rgbe[y] = _read_scanline(buf, w)
    return HdrImage(rgb=_rgbe_to_float(rgbe), units_calibrated=False)


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError("truncated scanline")
    return b


def _read_scanline(buf, w: int) -> np.ndarray:
    head = _read_exact(buf, 4)
    if head[0] == 2 and head[1] == 2 and (head[2] << 8) + head[3] == w and w >= 8:
        # new-style RLE: four independently run-length-coded component streams
        line = np.empty((w, 4), dtype=np.uint8)
        for c in range(4):
            i = 0
            while i < w:
                n = _read_exact(buf, 1)[0]
                if n > 128:
                    count = n - 128
                    if i + count > w:
                        raise FormatError("truncated scanline: run overflows width")
                    line[i:i + count, c] = _read_exact(buf, 1)[0]
                else:
                    count = n
                    if count == 0 or i + count > w:
                        raise FormatError("truncated scanline: bad literal count")
                    line[i:i + count, c] = np.frombuffer(_read_exact(buf, count), np.uint8)
                i += count
        return line
    # flat scanline; the four bytes already read are the first pixel
    rest = _read_exact(buf, 4 * (w - 1)) if w > 1 else b""
    return np.frombuffer(head + rest, np.uint8).reshape(w, 4)


def save_radiance_hdr(img: HdrImage) -> bytes:
    """Encode to Radiance RGBE, using RLE scanlines when the width allows."""
    h, w = img.height, img.width
    rgbe = _float_to_rgbe(img.rgb)
    out = _stdio.BytesIO()
    out.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
    out.write(f"-Y {h} +X {w}\n".encode("ascii"))
    use_rle = 8 <= w <= 32767
    for y in range(h):
        if use_rle:
            out.write(bytes([2, 2, (w >> 8) & 0xFF, w & 0xFF]))
            for c in range(4):
                out.write(_rle_encode(rgbe[y, :, c]))
        else:
            out.write(rgbe[y].tobytes())
    return out.getvalue()


def _rle_encode(comp: np.ndarray) -> bytes:
    """Run-length encode one scanline component (runs >= 4 bytes)."""
    out = bytearray()
    i, n = 0, len(comp)
    while i < n:
        run = 1
        while i + run < n and run < 127 and comp[i + run] == comp[i]:
            run += 1
        if run >= 4:
            out.append(128 + run)
            out.append(int(comp[i]))
            i += run
            continue
        j = i
        while j < n and j - i < 128:
            nxt = 1
            while j + nxt < n and nxt < 4 and comp[j + nxt] == comp[j]:
                nxt += 1
            if nxt >= 4:
                break
            j += 1
        out.append(j - i)
        out.extend(comp[i:j].tobytes())
        i = j
    return bytes(out)


# ---------------------------------------------------------------------------
# PFM (portable float map)
# ---------------------------------------------------------------------------


def load_pfm(data: bytes) -> HdrImage:
    """Decode a PFM stream ("PF" color / "Pf" gray, bottom-up rows).

    A negative scale token means little-endian; its magnitude multiplies
    the decoded values. Gray maps are replicated to three channels.
    """
    buf = _stdio.BytesIO(data)

    def token() -> bytes:
        t = b""
        while True:
            ch = buf.read(1)
            if ch == b"":
                raise FormatError("truncated PFM header")
            if ch.isspace():
                if t:
                    return t
                continue
            t += ch

    magic = token()
    if magic not in (b"PF", b"Pf"):
        raise FormatError(f"bad PFM magic {magic.decode('ascii', 'replace')!r}")
    channels = 3 if magic == b"PF" else 1
    try:
        w = int(token())
        h = int(token())
        scale = float(token())
    except ValueError as exc:
        raise FormatError("bad PFM header token") from exc
    if w < 1 or h < 1 or w * h > 2**28:
        raise FormatError("PFM dimension overflow")
    if scale == 0:
        raise FormatError("PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    payload = buf.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("short PFM payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels).astype(np.float64)
    arr = arr[::-1]  # rows are stored bottom-up
    arr = arr * abs(scale)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return HdrImage(rgb=arr, units_calibrated=False)


def save_pfm(raster: np.ndarray) -> bytes:
    """Encode a (H, W) gray or (H, W, 3) color float raster as little-endian PFM."""
    raster = np.asarray(raster, dtype=np.float32)
    if raster.ndim == 2:
        magic, body = b"Pf", raster[:, :, None]
    elif raster.ndim == 3 and raster.shape[2] == 3:
        magic, body = b"PF", raster
    else:
        raise ValueError(f"raster must be (H, W) or (H, W, 3), got {raster.shape}")
    h, w = body.shape[:2]
    header = magic + f"\n{w} {h}\n-1.0\n".encode("ascii")
    return header + body[::-1].astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def save_png(img: LdrImage, gamma_encode: bool = False) -> bytes:
    """Encode as 8-bit PNG; optionally apply the 1/2.2 display gamma first."""
    v = img.values
    if gamma_encode:
        v = np.power(v, 1.0 / 2.2)
    q = np.rint(v * 255.0).clip(0, 255).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    buf = _stdio.BytesIO()
    Image.fromarray(q, mode).save(buf, format="PNG")
    return buf.getvalue()


def load_png(data: bytes) -> LdrImage:
    """Decode an 8-bit PNG to [0, 1] floats (no gamma linearization)."""
    try:
        img = Image.open(_stdio.BytesIO(data))
        img.load()
    except Exception as exc:
        raise FormatError(f"cannot decode PNG: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return LdrImage(values=np.asarray(img, dtype=np.float64) / 255.0)


# ---------------------------------------------------------------------------
# Luminance, calibration, color
# ---------------------------------------------------------------------------


def extract_luminance(img: HdrImage) -> LuminanceMap:
    """Rec. 709 linear-light luminance: Y = 0.2126 R + 0.7152 G + 0.0722 B."""
    r, g, b = LUMA_WEIGHTS
    lum = r * img.rgb[..., 0] + g * img.rgb[..., 1] + b * img.rgb[..., 2]
    return LuminanceMap(lum=lum, calibrated=img.units_calibrated)


def calibrate(lum: LuminanceMap, s_min: float, s_max: float) -> LuminanceMap:
    """Affinely rescale relative measurements to physical [s_min, s_max] cd/m^2.

    The measurement range maps exactly onto [s_min, s_max]; a constant
    input has no range to stretch and raises ``DegenerateImageError``.
    """
    if not (0 < s_min < s_max):
        raise ValueError(f"need 0 < s_min < s_max, got ({s_min}, {s_max})")
    r = lum.lum
    r_min, r_max = float(r.min()), float(r.max())
    if r_max == r_min:
        raise DegenerateImageError("constant image cannot be calibrated")
    norm = (r - r_min) / (r_max - r_min)
    out = s_min + norm * (s_max - s_min)
    out = np.clip(out, s_min, s_max)
    # force exact endpoints regardless of rounding
    out[r == r_min] = s_min
    out[r == r_max] = s_max
    return LuminanceMap(lum=out, calibrated=True)


def color_reproduce(hdr: HdrImage, s_lum: LuminanceMap, f_lum: LuminanceMap,
                    rho: float = 0.6) -> LdrImage:
    """Re-inject color into a tone-mapped luminance image.

    Per channel c, F_c = (S_c / S)**rho * F, clamped to [0, 1]. ``f_lum``
    must already be normalized display luminance in [0, 1]; ``s_lum`` is
    the luminance of ``hdr`` in the same units as its channels.
    Zero-luminance pixels use a channel ratio of 1 (gray output).
    """
    if hdr.rgb.shape[:2] != s_lum.lum.shape or s_lum.lum.shape != f_lum.lum.shape:
        raise ValueError("hdr, s_lum and f_lum must share spatial dimensions")
    if np.any(f_lum.lum < 0) or np.any(f_lum.lum > 1):
        raise ValueError("f_lum must be normalized to [0, 1]")
    s = s_lum.lum[..., None]
    ratio = np.divide(hdr.rgb, s, out=np.ones_like(hdr.rgb), where=s > 0)
    out = np.power(ratio, rho) * f_lum.lum[..., None]
    return LdrImage(values=np.clip(out, 0.0, 1.0))


def decode_hdr(data: bytes) -> HdrImage:
    """Decode an HDR byte stream, sniffing Radiance vs PFM by magic bytes."""
    if data[:2] in (b"PF", b"Pf"):
        return load_pfm(data)
    if data[:2] == b"#?":
        return load_radiance_hdr(data)
    raise FormatError("unrecognized HDR container (expected Radiance or PFM)")
