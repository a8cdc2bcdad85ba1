"""Forward synthesis of underwater images from in-air RGB-D input.

The formation model attenuates the in-air image exponentially with
depth (absorption), adds depth-saturating background light
(backscatter), blurs the in-air image with a unit-sum Gaussian
(forward scatter), and fuses the summed field through a learnable
linear filter:

    I_ab  = I_a * exp(-d * beta)          per channel
    I_bsc = B * (1 - exp(-d * alpha))     per channel
    I_fsc = I_a convolved with Gaussian(q), kernel unit-sum
    I_add = I_ab + I_bsc + I_fsc
    I_sw  = clamp(theta_f applied to concat(I_add, aux))

Intermediates stay unclamped; the single clamp sits at the fusion
output so the analytic gradient chain in the fitting module is exact
everywhere the output is interior. A kernel size of 1 switches the
forward-scatter branch off entirely, which makes beta = alpha = 0 an
exact identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import DepthMap, RgbImage


def identity_filter(channels: int = 3) -> np.ndarray:
    """1x1 fusion filter passing physical channels through, zero elsewhere.

    Output channel lambda takes input channel m = lambda with weight 1;
    auxiliary channels (m >= 3) start at zero so fusion reduces to the
    pure physical model.
    """
    theta = np.zeros((3, 1, 1, channels))
    for lam in range(3):
        theta[lam, 0, 0, lam] = 1.0
    return theta


@dataclass(frozen=True)
class PhysicalParams:
    """Per-channel formation coefficients plus the fusion filter.

    beta and alpha are non-negative per-channel absorption and
    backscatter rates (depth-normalized, so physical scale lives in the
    coefficients). big_b is the global background light in [0, 1].
    theta_f has shape (3, W, H, M): one (W, H, M) weight block per
    output channel, applied corner-anchored at stride 1.
    """

    beta: np.ndarray
    alpha: np.ndarray
    big_b: np.ndarray
    q: float = 5.0
    kernel_size: int = 5
    theta_f: np.ndarray = field(default_factory=identity_filter)

    def __post_init__(self):
        # scalars broadcast to all three channels
        beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (3,)).copy()
        alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (3,)).copy()
        big_b = np.broadcast_to(np.asarray(self.big_b, dtype=np.float64), (3,)).copy()
        theta = np.asarray(self.theta_f, dtype=np.float64)
        for name, vec in (("beta", beta), ("alpha", alpha), ("big_b", big_b)):
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(beta < 0) or np.any(alpha < 0):
            raise ValueError("beta and alpha must be non-negative")
        if np.any(big_b < 0) or np.any(big_b > 1):
            raise ValueError("big_b components must lie in [0, 1]")
        if not (np.isfinite(self.q) and self.q > 0):
            raise ValueError("q must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 1")
        if theta.ndim != 4 or theta.shape[0] != 3:
            raise ValueError(f"theta_f must have shape (3, W, H, M), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta_f contains non-finite values")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "big_b", big_b)
        object.__setattr__(self, "q", float(self.q))
        object.__setattr__(self, "kernel_size", int(self.kernel_size))
        object.__setattr__(self, "theta_f", theta)

    def to_json(self) -> str:
        _, w, h, m = self.theta_f.shape
        doc = {
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "B": self.big_b.tolist(),
            "q": self.q,
            "kernel_size": self.kernel_size,
            "theta_f": {
                "w": w,
                "h": h,
                "m": m,
                # row-major over (output channel, w, h, m)
                "weights": self.theta_f.ravel().tolist(),
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhysicalParams":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed parameter JSON: {exc}") from exc
        try:
            tf = doc["theta_f"]
            theta = np.asarray(tf["weights"], dtype=np.float64).reshape(
                3, tf["w"], tf["h"], tf["m"]
            )
            return cls(
                beta=np.asarray(doc["beta"], dtype=np.float64),
                alpha=np.asarray(doc["alpha"], dtype=np.float64),
                big_b=np.asarray(doc["B"], dtype=np.float64),
                q=float(doc["q"]),
                kernel_size=int(doc["kernel_size"]),
                theta_f=theta,
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"parameter JSON missing or mistyped field: {exc}") from exc


def load_params(path: str) -> PhysicalParams:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such parameter file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return PhysicalParams.from_json(fh.read())


def save_params(params: PhysicalParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(params.to_json())
        fh.write("\n")


# ---------------------------------------------------------------------------
# formation stages
# ---------------------------------------------------------------------------

def _check_pair(i_a: RgbImage, i_d: DepthMap) -> None:
    if (i_a.height, i_a.width) != (i_d.height, i_d.width):
        raise ValueError(
            f"image {i_a.height}x{i_a.width} and depth {i_d.height}x{i_d.width} differ"
        )


def absorption(i_a: RgbImage, i_d: DepthMap, beta: np.ndarray) -> RgbImage:
    """Exponential attenuation: per channel, I_a * exp(-d * beta)."""
    _check_pair(i_a, i_d)
    beta = np.asarray(beta, dtype=np.float64).reshape(3)
    if np.any(beta < 0):
        raise ValueError("beta must be non-negative")
    return RgbImage(i_a.data * np.exp(-i_d.data[..., None] * beta))


def backscatter(i_d: DepthMap, alpha: np.ndarray, big_b: np.ndarray) -> RgbImage:
    """Background light buildup: per channel, B * (1 - exp(-d * alpha))."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(3)
    big_b = np.asarray(big_b, dtype=np.float64).reshape(3)
    if np.any(alpha < 0):
        raise ValueError("alpha must be non-negative")
    if np.any(big_b < 0) or np.any(big_b > 1):
        raise ValueError("big_b components must lie in [0, 1]")
    return RgbImage(big_b * (1.0 - np.exp(-i_d.data[..., None] * alpha)))


def gaussian_kernel(q: float, kernel_size: int) -> np.ndarray:
    """Discrete Gaussian exp(-(x^2 + y^2) / q^2) normalized to sum exactly 1."""
    if not (np.isfinite(q) and q > 0):
        raise ValueError("q must be positive")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be an odd integer >= 1")
    half = kernel_size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    sq = coords[:, None] ** 2 + coords[None, :] ** 2
    kernel = np.exp(-sq / (q * q))
    return kernel / kernel.sum()


def forward_scatter(i_a: RgbImage, kernel: np.ndarray) -> RgbImage:
    """Per-channel 2-D convolution with replicate-padded borders."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {kernel.shape}")
    half = kernel.shape[0] // 2
    if half == 0:
        return RgbImage(i_a.data * kernel[0, 0])
    height, width = i_a.height, i_a.width
    padded = np.pad(i_a.data, ((half, half), (half, half), (0, 0)), mode="edge")
    out = np.zeros_like(i_a.data)
    for dy in range(kernel.shape[0]):
        for dx in range(kernel.shape[1]):
            out += kernel[dy, dx] * padded[dy : dy + height, dx : dx + width]
    return RgbImage(out)


def scatter(i_bsc: RgbImage, i_fsc: RgbImage) -> RgbImage:
    """Total scattered light: elementwise sum, deliberately unclamped."""
    if (i_bsc.height, i_bsc.width) != (i_fsc.height, i_fsc.width):
        raise ValueError("scatter components differ in size")
    return RgbImage(i_bsc.data + i_fsc.data)


def _fuse_raw(con: np.ndarray, theta_f: np.ndarray) -> np.ndarray:
    """Corner-anchored linear fusion without the output clamp.

    out[y, x, lam] = sum_{w, h, m} con[y + h, x + w, m] * theta_f[lam, w, h, m]
    with out-of-range indices clipped to the border (replicate padding).
    """
    height, width, channels = con.shape
    _, filt_w, filt_h, filt_m = theta_f.shape
    if filt_m != channels:
        raise ValueError(f"filter depth {filt_m} != fused channel count {channels}")
    ys = np.arange(height)
    xs = np.arange(width)
    out = np.zeros((height, width, 3))
    for w in range(filt_w):
        cols = np.minimum(xs + w, width - 1)
        for h in range(filt_h):
            rows = np.minimum(ys + h, height - 1)
            window = con[np.ix_(rows, cols)]  # (H, W, M)
            out += np.einsum("yxm,lm->yxl", window, theta_f[:, w, h, :])
    return out


def fuse(i_add: RgbImage, aux: RgbImage | None, theta_f: np.ndarray) -> RgbImage:
    """Apply the fusion filter to concat(i_add, aux) and clamp to [0, 1]."""
    con = _concat(i_add, aux)
    theta_f = np.asarray(theta_f, dtype=np.float64)
    if theta_f.ndim != 4 or theta_f.shape[0] != 3:
        raise ValueError(f"theta_f must have shape (3, W, H, M), got {theta_f.shape}")
    return RgbImage(np.clip(_fuse_raw(con, theta_f), 0.0, 1.0))


def _concat(i_add: RgbImage, aux: RgbImage | None) -> np.ndarray:
    if aux is None:
        return i_add.data
    if (aux.height, aux.width) != (i_add.height, i_add.width):
        raise ValueError("auxiliary branch dimensions differ from the physical branch")
    if np.any(aux.data < 0) or np.any(aux.data > 1):
        raise ValueError("auxiliary branch values must lie in [0, 1]")
    return np.concatenate([i_add.data, aux.data], axis=2)


@dataclass(frozen=True)
class SynthesisState:
    """Forward-pass intermediates cached for the analytic gradient chain."""

    i_a: np.ndarray        # (H, W, 3) in-air image
    i_d: np.ndarray        # (H, W) depth
    con: np.ndarray        # (H, W, M) fused-filter input
    raw_fused: np.ndarray  # (H, W, 3) pre-clamp fusion output
    clamped: np.ndarray    # (H, W, 3) bool, True where the clamp was active
    params: PhysicalParams


def _synthesize_arrays(
    i_a: np.ndarray,
    i_d: np.ndarray,
    beta: np.ndarray,
    alpha: np.ndarray,
    big_b: np.ndarray,
    kernel: np.ndarray | None,
    theta_f: np.ndarray,
    aux: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Unvalidated formation chain; returns (raw fused output, con)."""
    depth = i_d[..., None]
    i_ab = i_a * np.exp(-depth * beta)
    i_bsc = big_b * (1.0 - np.exp(-depth * alpha))
    i_add = i_ab + i_bsc
    if kernel is not None:
        i_add = i_add + forward_scatter(RgbImage(i_a), kernel).data
    con = i_add if aux is None else np.concatenate([i_add, aux], axis=2)
    return _fuse_raw(con, theta_f), con


def synthesize_with_state(
    i_a: RgbImage,
    i_d: DepthMap,
    params: PhysicalParams,
    aux: RgbImage | None = None,
) -> tuple[RgbImage, SynthesisState]:
    """Run the formation chain and keep intermediates for gradients."""
    _check_pair(i_a, i_d)
    if aux is not None and (aux.height, aux.width) != (i_a.height, i_a.width):
        raise ValueError("auxiliary branch dimensions differ from the input image")
    expected_m = 3 if aux is None else 6
    if params.theta_f.shape[3] != expected_m:
        raise ValueError(
            f"filter depth {params.theta_f.shape[3]} != fused channel count {expected_m}"
        )
    # A size-1 kernel disables the forward-scatter branch, giving an
    # exact identity at beta = alpha = 0.
    kernel = None
    if params.kernel_size > 1:
        kernel = gaussian_kernel(params.q, params.kernel_size)
    raw, con = _synthesize_arrays(
        i_a.data,
        i_d.data,
        params.beta,
        params.alpha,
        params.big_b,
        kernel,
        params.theta_f,
        None if aux is None else aux.data,
    )
    clamped = (raw < 0.0) | (raw > 1.0)
    state = SynthesisState(
        i_a=i_a.data, i_d=i_d.data, con=con, raw_fused=raw, clamped=clamped, params=params
    )
    return RgbImage(np.clip(raw, 0.0, 1.0)), state


def synthesize(
    i_a: RgbImage,
    i_d: DepthMap,
    params: PhysicalParams,
    aux: RgbImage | None = None,
) -> RgbImage:
    """Synthesize an underwater image; deterministic for fixed inputs."""
    out, _ = synthesize_with_state(i_a, i_d, params, aux)
    return out
