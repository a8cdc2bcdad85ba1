"""Full-reference and no-reference image quality metrics.

Full-reference metrics (MSE, PSNR, SSIM, PCQI) compare a test image
against a reference on the [0, 1] scale with dynamic range 1.0.
No-reference metrics score a single image: UICM (colorfulness from
trimmed opponent-channel statistics), UISM (Sobel-weighted block
enhancement measure), UIConM (parameterized logarithmic block contrast),
their linear combination UIQM, and UCIQE (CIELAB chroma/contrast/
saturation combination).

Conventions frozen here so scores are reproducible bit-for-bit:

- SSIM and PCQI operate on BT.601 luma with an 11x11 Gaussian window
  (sigma 1.5) and average the local map over fully supported windows
  only (no padding).
- UICM, UISM, and UIConM follow the common convention of computing on
  the 255-coded scale (values multiplied by 255, kept floating point);
  their published constants assume that range. Blocks truncated at the
  borders are dropped, and degenerate blocks (zero denominator or a
  non-positive log argument) contribute zero.
- UCIQE uses CIELAB with L* in [0, 100]; saturation is chroma / L*
  with zero-lightness pixels contributing zero.

Every metric is a pure function; `evaluate` batches them over aligned
image lists and emits one row per image plus a MEAN row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import RgbImage, rgb_to_lab

_BT601 = np.array([0.299, 0.587, 0.114])

# colorfulness coefficients from the published opponent-channel measure
_UICM_MEAN_COEFF = -0.0268
_UICM_VAR_COEFF = 0.1586

_SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
_SOBEL_Y = _SOBEL_X.T

FULL_REFERENCE_COLUMNS = ("MSE", "PSNR", "SSIM", "PCQI")
NO_REFERENCE_COLUMNS = ("UICM", "UISM", "UICONM", "UIQM", "UCIQE")


@dataclass(frozen=True)
class MetricConfig:
    """Windows, block sizes, and coefficients for all metrics."""

    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    pcqi_window: int = 11
    pcqi_sigma: float = 1.5
    block_size: int = 8
    trim_fraction: float = 0.1
    uiqm_coeffs: tuple[float, float, float] = (0.0282, 0.2953, 3.5753)
    uciqe_coeffs: tuple[float, float, float] = (0.4680, 0.2745, 0.2576)
    plip_gamma: float = 1026.0

    def __post_init__(self):
        if self.ssim_window < 1 or self.pcqi_window < 1 or self.block_size < 1:
            raise ValueError("windows and block size must be positive")
        if not (self.ssim_sigma > 0 and self.pcqi_sigma > 0):
            raise ValueError("window sigma must be positive")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")
        if not (self.dynamic_range > 0 and np.isfinite(self.dynamic_range)):
            raise ValueError("dynamic_range must be positive")
        for coeffs in (self.uiqm_coeffs, self.uciqe_coeffs):
            if len(coeffs) != 3 or not all(np.isfinite(c) for c in coeffs):
                raise ValueError("metric coefficients must be three finite values")
        if not (np.isfinite(self.plip_gamma) and self.plip_gamma > 255.0):
            raise ValueError("plip_gamma must exceed the 255 coding range")


@dataclass(frozen=True)
class MetricReport:
    """Named scores for one image (or the dataset MEAN row)."""

    name: str
    values: dict[str, float]


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _check_same_size(a: RgbImage, b: RgbImage) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("images differ in size")


def _luma(img: RgbImage) -> np.ndarray:
    return np.einsum("yxc,c->yx", img.data, _BT601, optimize=False)


def _gaussian_window(sigma: float, size: int) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return w / w.sum()


def _windowed_mean(field: np.ndarray, w1d: np.ndarray) -> np.ndarray:
    """Separable weighted mean over every fully supported window."""
    size = w1d.size
    rows = np.lib.stride_tricks.sliding_window_view(field, size, axis=0)
    part = np.einsum("ywk,k->yw", rows, w1d, optimize=False)
    cols = np.lib.stride_tricks.sliding_window_view(part, size, axis=1)
    return np.einsum("ywk,k->yw", cols, w1d, optimize=False)


def _window_stats(x, y, w1d):
    mx = _windowed_mean(x, w1d)
    my = _windowed_mean(y, w1d)
    vx = _windowed_mean(x * x, w1d) - mx * mx
    vy = _windowed_mean(y * y, w1d) - my * my
    cxy = _windowed_mean(x * y, w1d) - mx * my
    return mx, my, vx, vy, cxy


def _block_extrema(field: np.ndarray, block: int):
    """Per-block (max, min) over complete blocks; border remainders dropped."""
    height, width = field.shape
    nby, nbx = height // block, width // block
    if nby == 0 or nbx == 0:
        raise ValueError("image smaller than the block size")
    tiles = field[: nby * block, : nbx * block].reshape(nby, block, nbx, block)
    return tiles.max(axis=(1, 3)), tiles.min(axis=(1, 3))


def _sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    padded = np.pad(channel, 1, mode="edge")
    gx = np.zeros_like(channel)
    gy = np.zeros_like(channel)
    height, width = channel.shape
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + height, dx : dx + width]
            gx += _SOBEL_X[dy, dx] * patch
            gy += _SOBEL_Y[dy, dx] * patch
    return np.hypot(gx, gy)


# ---------------------------------------------------------------------------
# full-reference metrics
# ---------------------------------------------------------------------------

def mse(a: RgbImage, b: RgbImage) -> float:
    """Mean squared difference over all pixels and channels."""
    _check_same_size(a, b)
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def psnr(a: RgbImage, b: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(cfg.dynamic_range**2 / err))


def ssim(a: RgbImage, b: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean structural similarity of the BT.601 luma channels.

    Gaussian-windowed means/variances/covariance in the standard
    (2 mu_x mu_y + C1)(2 cov + C2) / ((mu_x^2 + mu_y^2 + C1)(var_x + var_y + C2))
    form, averaged over fully supported windows.
    """
    _check_same_size(a, b)
    if min(a.height, a.width) < cfg.ssim_window:
        raise ValueError("image smaller than the SSIM window")
    x = _luma(a)
    y = _luma(b)
    w1d = _gaussian_window(cfg.ssim_sigma, cfg.ssim_window)
    mx, my, vx, vy, cxy = _window_stats(x, y, w1d)
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2)
    )
    return float(s.mean())


def pcqi(a: RgbImage, b: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Patch-based contrast quality index of the luma channels.

    Per window, the product of a contrast-change term
    (4/pi) atan((cov + C) / (var_a + C)), a structural term
    (cov + C) / (sd_a sd_b + C), and a mean-intensity term
    exp(-|mu_a - mu_b| / 256), computed on the 255-coded scale with
    C = 3 and averaged over fully supported windows. Identical inputs
    score exactly 1.
    """
    _check_same_size(a, b)
    if min(a.height, a.width) < cfg.pcqi_window:
        raise ValueError("image smaller than the PCQI window")
    x = _luma(a) * 255.0
    y = _luma(b) * 255.0
    w1d = _gaussian_window(cfg.pcqi_sigma, cfg.pcqi_window)
    mx, my, vx, vy, cxy = _window_stats(x, y, w1d)
    sx = np.sqrt(np.maximum(vx, 0.0))
    sy = np.sqrt(np.maximum(vy, 0.0))
    c = 3.0
    contrast = (4.0 / np.pi) * np.arctan((cxy + c) / (vx + c))
    structure = (cxy + c) / (sx * sy + c)
    intensity = np.exp(-np.abs(mx - my) / 256.0)
    return float(np.mean(contrast * structure * intensity))


# ---------------------------------------------------------------------------
# no-reference metrics
# ---------------------------------------------------------------------------

def _trimmed_mean(values: np.ndarray, fraction: float) -> float:
    """Mean with ceil(f K) lowest and floor(f K) highest values dropped."""
    count = values.size
    low = math.ceil(fraction * count)
    high = math.floor(fraction * count)
    kept = np.sort(values)[low : count - high]
    if kept.size == 0:
        return float(values.mean())
    return float(kept.mean())


def uicm(img: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Colorfulness from trimmed statistics of the opponent channels.

    RG = R - G and YB = (R + G)/2 - B on the 255-coded scale; the
    trimmed means and the untrimmed second moments about them combine
    as -0.0268 |mu| + 0.1586 |sigma| (Euclidean norms over the two
    channels). Exactly zero for achromatic images.
    """
    scaled = img.data * 255.0
    rg = (scaled[..., 0] - scaled[..., 1]).ravel()
    yb = ((scaled[..., 0] + scaled[..., 1]) / 2.0 - scaled[..., 2]).ravel()
    mu_rg = _trimmed_mean(rg, cfg.trim_fraction)
    mu_yb = _trimmed_mean(yb, cfg.trim_fraction)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return _UICM_MEAN_COEFF * math.hypot(mu_rg, mu_yb) + _UICM_VAR_COEFF * math.sqrt(
        var_rg + var_yb
    )


def uism(img: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Sharpness from BT.601-weighted block enhancement of edge maps.

    Each channel is weighted by its own Sobel gradient magnitude
    (replicate padding at the borders); per complete block the measure
    adds log(max/min), zero when the block minimum is zero, scaled by
    2 / (number of blocks). Exactly zero for constant images.
    """
    total = 0.0
    for idx in range(3):
        channel = img.data[..., idx] * 255.0
        edge_weighted = _sobel_magnitude(channel) * channel
        mx, mn = _block_extrema(edge_weighted, cfg.block_size)
        safe = mn > 0.0
        ratios = np.where(safe, np.log(np.where(safe, mx, 1.0) / np.where(safe, mn, 1.0)), 0.0)
        total += _BT601[idx] * 2.0 / mx.size * float(ratios.sum())
    return float(total)


def uiconm(img: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Contrast from the parameterized logarithmic block measure.

    Per complete luma block (255-coded), the Michelson-style ratio is
    formed with parameterized operations of gain gamma:
    top = gamma (max - min) / (gamma - min), bot = max + min - max min / gamma,
    kappa = top / bot, contributing kappa log(kappa) when positive. The
    block sum s maps through the parameterized scaling
    gamma - gamma (1 - s / gamma)^(1/blocks). Exactly zero for constant
    images.
    """
    luma = _luma(img) * 255.0
    mx, mn = _block_extrema(luma, cfg.block_size)
    gamma = cfg.plip_gamma
    top = gamma * (mx - mn) / (gamma - mn)
    bot = mx + mn - mx * mn / gamma
    safe = bot != 0.0
    kappa = np.where(safe, top / np.where(safe, bot, 1.0), 0.0)
    positive = kappa > 0.0
    contrib = np.where(positive, kappa * np.log(np.where(positive, kappa, 1.0)), 0.0)
    s = float(contrib.sum())
    return float(gamma - gamma * (1.0 - s / gamma) ** (1.0 / mx.size))


def uiqm(img: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """Weighted combination c1 UICM + c2 UISM + c3 UIConM."""
    c1, c2, c3 = cfg.uiqm_coeffs
    return c1 * uicm(img, cfg) + c2 * uism(img, cfg) + c3 * uiconm(img, cfg)


def uciqe(img: RgbImage, cfg: MetricConfig = MetricConfig()) -> float:
    """CIELAB combination of chroma spread, L* contrast, and saturation.

    c1 sigma_chroma + c2 (q99(L*) - q01(L*)) + c3 mean(chroma / L*),
    with zero-lightness pixels contributing zero saturation. Exactly
    zero for constant gray images.
    """
    lab = rgb_to_lab(img).data
    lum = lab[..., 0]
    chroma = np.hypot(lab[..., 1], lab[..., 2])
    sigma_chroma = float(chroma.std())
    contrast = float(np.quantile(lum, 0.99) - np.quantile(lum, 0.01))
    lit = lum > 0.0
    saturation = float(np.mean(np.where(lit, chroma / np.where(lit, lum, 1.0), 0.0)))
    c1, c2, c3 = cfg.uciqe_coeffs
    return c1 * sigma_chroma + c2 * contrast + c3 * saturation


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------

def evaluate(
    images: list[RgbImage],
    refs: list[RgbImage] | None = None,
    cfg: MetricConfig = MetricConfig(),
    names: list[str] | None = None,
) -> tuple[list[MetricReport], MetricReport]:
    """Score every image, returning per-image reports plus the MEAN row.

    With refs present (aligned 1:1), full-reference columns come first;
    otherwise only the no-reference columns are produced.
    """
    if not images:
        raise ValueError("evaluate requires at least one image")
    if refs is not None and len(refs) == 0:
        refs = None
    if refs is not None and len(refs) != len(images):
        raise ValueError("refs must align 1:1 with images")
    if names is None:
        names = [f"image_{i:04d}" for i in range(len(images))]
    if len(names) != len(images):
        raise ValueError("names must align 1:1 with images")

    reports = []
    for i, img in enumerate(images):
        values: dict[str, float] = {}
        if refs is not None:
            ref = refs[i]
            values["MSE"] = mse(img, ref)
            values["PSNR"] = psnr(img, ref, cfg)
            values["SSIM"] = ssim(img, ref, cfg)
            values["PCQI"] = pcqi(img, ref, cfg)
        components = (uicm(img, cfg), uism(img, cfg), uiconm(img, cfg))
        c1, c2, c3 = cfg.uiqm_coeffs
        values["UICM"], values["UISM"], values["UICONM"] = components
        values["UIQM"] = c1 * components[0] + c2 * components[1] + c3 * components[2]
        values["UCIQE"] = uciqe(img, cfg)
        reports.append(MetricReport(name=names[i], values=values))

    columns = list(reports[0].values.keys())
    mean_values = {
        col: float(np.mean([r.values[col] for r in reports])) for col in columns
    }
    return reports, MetricReport(name="MEAN", values=mean_values)


def format_metric(value: float) -> str:
    """Serialize a score: full precision, +inf rendered as "Inf"."""
    if math.isinf(value) and value > 0:
        return "Inf"
    return repr(float(value))


def write_metrics_csv(
    reports: list[MetricReport], mean_report: MetricReport, path: str
) -> None:
    """Write one row per image plus the final MEAN row."""
    if not reports:
        raise ValueError("no reports to write")
    columns = list(reports[0].values.keys())
    lines = ["filename," + ",".join(columns)]
    for report in list(reports) + [mean_report]:
        cells = [format_metric(report.values[col]) for col in columns]
        lines.append(report.name + "," + ",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
