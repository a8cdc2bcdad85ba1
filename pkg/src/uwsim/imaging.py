"""Image containers, file I/O, and colorspace conversion.

Images are carried as float64 arrays: RGB as (H, W, 3) and depth as
(H, W), both nominally in [0, 1]. Supported codecs are binary PPM (P6,
maxval 255), binary PGM (P5, maxval 255 or 65535), grayscale PFM
(little-endian, bottom-up rows), and 8-bit PNG via Pillow. The file
extension selects the codec.

8-bit codes map to [0, 1] through v / 255; writing quantizes with
round-half-up after clamping, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Malformed or unrecognized image file content."""


class UnsupportedDepthError(ImageFormatError):
    """File parses but uses a bit depth outside the supported set."""


@dataclass(frozen=True)
class RgbImage:
    """An (H, W, 3) float64 intensity field.

    Stored images keep channel values in [0, 1]; physics intermediates
    may exceed that range, so only finiteness and shape are enforced
    here. Loaders guarantee [0, 1] and ``save_rgb`` clamps on write.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RGB data must have shape (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must contain at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("RGB data contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """An (H, W) float64 scalar depth field.

    File loaders normalize codes to [0, 1]; directly constructed maps
    only need finite, non-negative values (synthetic far-field scenes
    use depths well above 1).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"depth data must have shape (H, W), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("depth map must contain at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("depth data contains non-finite values")
        if np.any(arr < 0):
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabImage:
    """An (H, W, 3) CIELAB field with channels (L*, a*, b*), L* in [0, 100]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"Lab data must have shape (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Lab data contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def quantize(values: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Clamp to [0, 1] then map to integer codes with round-half-up."""
    clamped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * maxval + 0.5).astype(np.uint16 if maxval > 255 else np.uint8)


def dequantize(codes: np.ndarray, maxval: int = 255) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / maxval


# ---------------------------------------------------------------------------
# Netpbm (PPM / PGM)
# ---------------------------------------------------------------------------

def _read_netpbm_tokens(raw: bytes, count: int, path: str) -> tuple[list[int], int]:
    """Parse `count` whitespace/comment-delimited integer header tokens.

    Returns the tokens and the offset of the first raster byte (one
    whitespace character after the last token, per the Netpbm spec).
    """
    tokens: list[int] = []
    pos = 2  # past the magic
    while len(tokens) < count:
        if pos >= len(raw):
            raise ImageFormatError(f"{path}: truncated header")
        ch = raw[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise ImageFormatError(f"{path}: unterminated comment in header")
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos : pos + 1].isdigit():
                pos += 1
            tokens.append(int(raw[start:pos]))
        else:
            raise ImageFormatError(f"{path}: unexpected byte {ch!r} in header")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace before raster data")
    return tokens, pos + 1


def _load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (expected magic P6)")
    (width, height, maxval), offset = _read_netpbm_tokens(raw, 3, path)
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: PPM maxval {maxval} unsupported (only 255)")
    expected = width * height * 3
    pixels = raw[offset : offset + expected]
    if len(pixels) < expected:
        raise ImageFormatError(f"{path}: raster truncated ({len(pixels)} of {expected} bytes)")
    codes = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return dequantize(codes)


def _save_ppm(data: np.ndarray, path: str) -> None:
    codes = quantize(data)
    header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.tobytes())


def _load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (expected magic P5)")
    (width, height, maxval), offset = _read_netpbm_tokens(raw, 3, path)
    if maxval == 255:
        dtype, itemsize = np.dtype(np.uint8), 1
    elif maxval == 65535:
        dtype, itemsize = np.dtype(">u2"), 2  # 16-bit Netpbm rasters are big-endian
    else:
        raise UnsupportedDepthError(f"{path}: PGM maxval {maxval} unsupported (255 or 65535)")
    expected = width * height * itemsize
    pixels = raw[offset : offset + expected]
    if len(pixels) < expected:
        raise ImageFormatError(f"{path}: raster truncated ({len(pixels)} of {expected} bytes)")
    codes = np.frombuffer(pixels, dtype=dtype).reshape(height, width)
    return np.asarray(codes, dtype=np.float64) / maxval


def _save_pgm(data: np.ndarray, path: str, maxval: int = 255) -> None:
    if maxval not in (255, 65535):
        raise UnsupportedDepthError(f"PGM maxval {maxval} unsupported (255 or 65535)")
    codes = quantize(data, maxval)
    if maxval == 65535:
        codes = codes.astype(">u2")
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.tobytes())


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian, bottom-up scanlines)
# ---------------------------------------------------------------------------

def _load_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip()
        if magic == b"PF":
            raise ImageFormatError(f"{path}: color PFM rejected, depth must be single-channel")
        if magic != b"Pf":
            raise ImageFormatError(f"{path}: not a grayscale PFM (expected magic Pf)")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: malformed PFM dimension line")
        width, height = int(dims[0]), int(dims[1])
        try:
            scale = float(fh.readline())
        except ValueError as exc:
            raise ImageFormatError(f"{path}: malformed PFM scale line") from exc
        endian = "<f4" if scale < 0 else ">f4"
        payload = fh.read(width * height * 4)
    if len(payload) < width * height * 4:
        raise ImageFormatError(f"{path}: PFM raster truncated")
    values = np.frombuffer(payload, dtype=endian).reshape(height, width)
    values = values[::-1]  # PFM stores scanlines bottom-to-top
    return np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)


def _save_pfm(data: np.ndarray, path: str) -> None:
    height, width = data.shape
    rows = np.asarray(data, dtype="<f4")[::-1]
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(rows.tobytes())


# ---------------------------------------------------------------------------
# PNG (8-bit via Pillow)
# ---------------------------------------------------------------------------

def _load_png_rgb(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: not a readable PNG ({exc})") from exc
    if img.mode != "RGB":
        raise UnsupportedDepthError(f"{path}: PNG mode {img.mode} unsupported, expected 8-bit RGB")
    return dequantize(np.asarray(img, dtype=np.uint8))


def _load_png_gray(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: not a readable PNG ({exc})") from exc
    if img.mode == "L":
        return dequantize(np.asarray(img, dtype=np.uint8))
    if img.mode in ("I", "I;16"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    raise ImageFormatError(f"{path}: PNG mode {img.mode} rejected, depth must be single-channel")


def _save_png_rgb(data: np.ndarray, path: str) -> None:
    Image.fromarray(quantize(data), mode="RGB").save(path, format="PNG")


def _save_png_gray(data: np.ndarray, path: str) -> None:
    Image.fromarray(quantize(data), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# public I/O entry points (extension selects codec)
# ---------------------------------------------------------------------------

def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such image file: {path}")


def load_rgb(path: str) -> RgbImage:
    """Load an 8-bit RGB image (PPM P6 or PNG) into [0, 1] floats."""
    _require_file(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        return RgbImage(_load_ppm(path))
    if ext == ".png":
        return RgbImage(_load_png_rgb(path))
    raise ImageFormatError(f"{path}: unsupported RGB image extension {ext!r}")


def save_rgb(img: RgbImage, path: str) -> None:
    """Write an RGB image, clamping to [0, 1] and quantizing round-half-up."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        _save_ppm(img.data, path)
    elif ext == ".png":
        _save_png_rgb(img.data, path)
    else:
        raise ImageFormatError(f"{path}: unsupported RGB image extension {ext!r}")


def load_depth(path: str) -> DepthMap:
    """Load a single-channel depth map (PGM, grayscale PNG, or PFM) into [0, 1]."""
    _require_file(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return DepthMap(_load_pgm(path))
    if ext == ".pfm":
        return DepthMap(_load_pfm(path))
    if ext == ".png":
        return DepthMap(_load_png_gray(path))
    if ext == ".ppm":
        raise ImageFormatError(f"{path}: multi-channel input rejected for depth")
    raise ImageFormatError(f"{path}: unsupported depth extension {ext!r}")


def save_depth(depth: DepthMap, path: str, maxval: int = 255) -> None:
    """Write a depth map as PGM (8/16-bit), grayscale PNG, or PFM."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        _save_pgm(depth.data, path, maxval)
    elif ext == ".pfm":
        _save_pfm(depth.data, path)
    elif ext == ".png":
        _save_png_gray(depth.data, path)
    else:
        raise ImageFormatError(f"{path}: unsupported depth extension {ext!r}")


# ---------------------------------------------------------------------------
# sRGB -> CIELAB (D65)
# ---------------------------------------------------------------------------

# IEC 61966-2-1 sRGB to XYZ matrix. The reference white is taken as the
# matrix row sums so that (1, 1, 1) maps to a* = b* = 0 exactly.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_POINT = _SRGB_TO_XYZ.sum(axis=1)


def _srgb_decode(v: np.ndarray) -> np.ndarray:
    """IEC 61966-2-1 piecewise decoding, sRGB code -> linear light."""
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3.0 * delta**2) + 4.0 / 29.0)


def rgb_to_lab(img: RgbImage) -> LabImage:
    """Convert sRGB-coded [0, 1] values to CIELAB under D65.

    Gray inputs (r = g = b) land on the neutral axis: L* carries the
    lightness and |a*|, |b*| stay below 1e-3.
    """
    linear = _srgb_decode(np.clip(img.data, 0.0, 1.0))
    xyz = linear @ _SRGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE_POINT)
    lightness = 116.0 * f[..., 1] - 16.0
    a_star = 500.0 * (f[..., 0] - f[..., 1])
    b_star = 200.0 * (f[..., 1] - f[..., 2])
    return LabImage(np.stack([lightness, a_star, b_star], axis=-1))
