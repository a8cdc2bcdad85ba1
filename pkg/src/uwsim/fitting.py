"""Gradient-based estimation of formation parameters from paired images.

The loss is the mean absolute difference between the synthesized and
the target underwater image. Gradients for beta, alpha, B, and the
fusion filter are assembled analytically by chaining the loss gradient
through the fusion filter back to each formation stage:

    dI_ab/dbeta   = -I_a * exp(-d * beta) * d
    dI_bsc/dalpha =  B * exp(-d * alpha) * d
    dI_bsc/dB     =  1 - exp(-d * alpha)
    dL/dtheta_f[lam, w, h, m] = sum_{x,y} dL/dI_sw[lam](x, y) * I_con(x+w, y+h, m)

Optimization is plain gradient descent: per-pair gradients are averaged
each epoch, one update per epoch, linear learning-rate decay to zero
after the decay-start epoch, and a projection keeping beta, alpha >= 0
and B in [0, 1]. A central-difference checker verifies every scalar
gradient independently.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import DepthMap, RgbImage, load_depth, load_rgb
from .physics import (
    PhysicalParams,
    SynthesisState,
    _fuse_raw,
    _synthesize_arrays,
    gaussian_kernel,
)


class FitDivergenceError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class FitConfig:
    """Gradient-descent settings.

    w1 is reserved for an adversarial term that is always zero here;
    w2 scales the reconstruction loss. With saturation_mask on, pixels
    clamped at the fusion output contribute no gradient.
    """

    learning_rate: float = 2e-4
    epochs: int = 200
    decay_start: int = 100
    w1: float = 0.0
    w2: float = 1.0
    saturation_mask: bool = True
    fit_theta_f: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ValueError("decay_start must lie in [0, epochs]")


@dataclass(frozen=True)
class GradEntry:
    name: str
    analytic: float
    finite_diff: float
    rel_error: float


@dataclass(frozen=True)
class GradReport:
    """Per-scalar comparison of analytic and central-difference gradients."""

    entries: tuple[GradEntry, ...]

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for e in self.entries)

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_error < threshold


@dataclass(frozen=True)
class LossTrace:
    """Per-epoch loss record plus the parameters at termination."""

    epochs: np.ndarray
    learning_rates: np.ndarray
    losses: np.ndarray
    final_params: PhysicalParams

    def __post_init__(self):
        losses = np.asarray(self.losses, dtype=np.float64)
        if not np.all(np.isfinite(losses)) or np.any(losses < 0):
            raise ValueError("loss trace must be finite and non-negative")
        object.__setattr__(self, "epochs", np.asarray(self.epochs, dtype=np.int64))
        object.__setattr__(
            self, "learning_rates", np.asarray(self.learning_rates, dtype=np.float64)
        )
        object.__setattr__(self, "losses", losses)

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def recon_loss(
    i_sw: RgbImage, i_w: RgbImage, clamped: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean absolute difference and its per-pixel gradient.

    L = mean |I_sw - I_w|; the gradient is sign(I_sw - I_w) / (3 H W),
    zeroed where `clamped` marks pixels saturated by the fusion clamp.
    """
    if (i_sw.height, i_sw.width) != (i_w.height, i_w.width):
        raise ValueError("synthesized and target images differ in size")
    diff = i_sw.data - i_w.data
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if clamped is not None:
        grad = np.where(clamped, 0.0, grad)
    return loss, grad


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------

def _fuse_backward_input(dsw: np.ndarray, theta_f: np.ndarray, con_shape) -> np.ndarray:
    """Adjoint of the corner-anchored fusion gather (exact, incl. clipping)."""
    height, width, _ = con_shape
    _, filt_w, filt_h, _ = theta_f.shape
    dcon = np.zeros(con_shape)
    ys = np.arange(height)
    xs = np.arange(width)
    for w in range(filt_w):
        cols = np.minimum(xs + w, width - 1)
        for h in range(filt_h):
            rows = np.minimum(ys + h, height - 1)
            contrib = np.einsum("yxl,lm->yxm", dsw, theta_f[:, w, h, :])
            np.add.at(dcon, (rows[:, None], cols[None, :]), contrib)
    return dcon


def _backprop_arrays(
    i_a: np.ndarray,
    i_d: np.ndarray,
    con: np.ndarray,
    beta: np.ndarray,
    alpha: np.ndarray,
    big_b: np.ndarray,
    theta_f: np.ndarray,
    dsw: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    depth = i_d[..., None]
    dcon = _fuse_backward_input(dsw, theta_f, con.shape)
    d_add = dcon[..., :3]

    decay_beta = np.exp(-depth * beta)
    decay_alpha = np.exp(-depth * alpha)
    g_beta = np.sum(d_add * (-i_a * decay_beta * depth), axis=(0, 1))
    g_alpha = np.sum(d_add * (big_b * decay_alpha * depth), axis=(0, 1))
    g_bigb = np.sum(d_add * (1.0 - decay_alpha), axis=(0, 1))

    height, width, _ = con.shape
    _, filt_w, filt_h, _ = theta_f.shape
    g_theta = np.zeros_like(theta_f)
    ys = np.arange(height)
    xs = np.arange(width)
    for w in range(filt_w):
        cols = np.minimum(xs + w, width - 1)
        for h in range(filt_h):
            rows = np.minimum(ys + h, height - 1)
            window = con[np.ix_(rows, cols)]
            g_theta[:, w, h, :] = np.einsum("yxl,yxm->lm", dsw, window)
    return g_beta, g_alpha, g_bigb, g_theta


def _backprop(
    state: SynthesisState, dsw: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Chain dL/dI_sw back to (beta, alpha, B, theta_f) gradients."""
    if state is None:
        raise ValueError("missing forward-pass state")
    params = state.params
    return _backprop_arrays(
        state.i_a, state.i_d, state.con, params.beta, params.alpha,
        params.big_b, params.theta_f, dsw,
    )


def grad_beta(state: SynthesisState, dsw: np.ndarray) -> np.ndarray:
    """dL/dbeta, one scalar per channel."""
    return _backprop(state, dsw)[0]


def grad_alpha(state: SynthesisState, dsw: np.ndarray) -> np.ndarray:
    """dL/dalpha, one scalar per channel."""
    return _backprop(state, dsw)[1]


def grad_bigb(state: SynthesisState, dsw: np.ndarray) -> np.ndarray:
    """dL/dB, one scalar per channel."""
    return _backprop(state, dsw)[2]


def grad_theta_f(state: SynthesisState, dsw: np.ndarray) -> np.ndarray:
    """dL/dtheta_f with the filter's own (3, W, H, M) shape."""
    return _backprop(state, dsw)[3]


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _loss_at(
    i_a: np.ndarray,
    i_d: np.ndarray,
    target: np.ndarray,
    beta: np.ndarray,
    alpha: np.ndarray,
    big_b: np.ndarray,
    kernel: np.ndarray | None,
    theta_f: np.ndarray,
) -> float:
    raw, _ = _synthesize_arrays(i_a, i_d, beta, alpha, big_b, kernel, theta_f, None)
    return float(np.mean(np.abs(np.clip(raw, 0.0, 1.0) - target)))


def finite_diff_check(
    pair: tuple[RgbImage, DepthMap, RgbImage],
    params: PhysicalParams,
    h: float = 1e-4,
) -> GradReport:
    """Compare every scalar gradient against central finite differences.

    Relative error per scalar is |a - f| / max(|a|, |f|, 1e-8).
    """
    if not 1e-6 <= h <= 1e-2:
        raise ValueError("finite-difference step h must lie in [1e-6, 1e-2]")
    i_a, i_d, i_w = pair
    kernel = None
    if params.kernel_size > 1:
        kernel = gaussian_kernel(params.q, params.kernel_size)

    raw, con = _synthesize_arrays(
        i_a.data, i_d.data, params.beta, params.alpha, params.big_b, kernel,
        params.theta_f, None,
    )
    out = RgbImage(np.clip(raw, 0.0, 1.0))
    clamped = (raw < 0.0) | (raw > 1.0)
    _, dsw = recon_loss(out, i_w, clamped)
    state = SynthesisState(
        i_a=i_a.data, i_d=i_d.data, con=con, raw_fused=raw, clamped=clamped, params=params
    )
    g_beta, g_alpha, g_bigb, g_theta = _backprop(state, dsw)

    groups = [
        ("beta", params.beta, g_beta),
        ("alpha", params.alpha, g_alpha),
        ("B", params.big_b, g_bigb),
        ("theta_f", params.theta_f, g_theta),
    ]
    entries = []
    for group_name, values, analytic in groups:
        flat_values = values.ravel()
        flat_analytic = analytic.ravel()
        for idx in range(flat_values.size):
            def loss_with(offset: float) -> float:
                bumped = flat_values.copy()
                bumped[idx] += offset
                bumped = bumped.reshape(values.shape)
                args = {
                    "beta": params.beta,
                    "alpha": params.alpha,
                    "big_b": params.big_b,
                    "theta_f": params.theta_f,
                }
                args[{"beta": "beta", "alpha": "alpha", "B": "big_b", "theta_f": "theta_f"}[
                    group_name
                ]] = bumped
                return _loss_at(i_a.data, i_d.data, i_w.data, kernel=kernel, **args)

            fd = (loss_with(h) - loss_with(-h)) / (2.0 * h)
            a = float(flat_analytic[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if values.ndim == 1:
                name = f"{group_name}[{idx}]"
            else:
                name = f"{group_name}[{','.join(map(str, np.unravel_index(idx, values.shape)))}]"
            entries.append(GradEntry(name, a, fd, rel))
    return GradReport(tuple(entries))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def _lr_at(cfg: FitConfig, epoch: int) -> float:
    if epoch < cfg.decay_start or cfg.epochs == cfg.decay_start:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


def fit(
    pairs: list[tuple[RgbImage, DepthMap, RgbImage]],
    init: PhysicalParams,
    cfg: FitConfig = FitConfig(),
) -> LossTrace:
    """Estimate (beta, alpha, B, theta_f) by full-batch gradient descent.

    Per-pair gradients are averaged each epoch (order-independent sum),
    followed by one descent step and the feasibility projection. Raises
    FitDivergenceError on the first non-finite loss or gradient.
    """
    if not pairs:
        raise ValueError("fit requires at least one (rgb, depth, target) pair")
    for i, (img, depth, target) in enumerate(pairs):
        if (img.height, img.width) != (depth.height, depth.width) or (
            img.height, img.width
        ) != (target.height, target.width):
            raise ValueError(f"pair {i}: rgb, depth, and target dimensions differ")

    beta = init.beta.copy()
    alpha = init.alpha.copy()
    big_b = init.big_b.copy()
    theta = init.theta_f.copy()
    kernel = None
    if init.kernel_size > 1:
        kernel = gaussian_kernel(init.q, init.kernel_size)

    epochs_out, lrs_out, losses_out = [], [], []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        loss_sum = 0.0
        g_beta = np.zeros(3)
        g_alpha = np.zeros(3)
        g_bigb = np.zeros(3)
        g_theta = np.zeros_like(theta)
        for img, depth, target in pairs:
            raw, con = _synthesize_arrays(
                img.data, depth.data, beta, alpha, big_b, kernel, theta, None
            )
            out = np.clip(raw, 0.0, 1.0)
            diff = out - target.data
            loss_sum += float(np.mean(np.abs(diff)))
            dsw = np.sign(diff) / diff.size
            if cfg.saturation_mask:
                dsw = np.where((raw < 0.0) | (raw > 1.0), 0.0, dsw)
            pb, pa, pdb, pt = _backprop_arrays(
                img.data, depth.data, con, beta, alpha, big_b, theta, dsw
            )
            g_beta += pb
            g_alpha += pa
            g_bigb += pdb
            g_theta += pt

        n = len(pairs)
        loss = cfg.w2 * loss_sum / n
        g_beta *= cfg.w2 / n
        g_alpha *= cfg.w2 / n
        g_bigb *= cfg.w2 / n
        g_theta *= cfg.w2 / n

        for name, grad in (
            ("beta", g_beta), ("alpha", g_alpha), ("B", g_bigb), ("theta_f", g_theta)
        ):
            if not np.all(np.isfinite(grad)):
                raise FitDivergenceError(
                    f"non-finite gradient for {name} at epoch {epoch}"
                )
        if not np.isfinite(loss):
            raise FitDivergenceError(f"non-finite loss at epoch {epoch}")

        epochs_out.append(epoch)
        lrs_out.append(lr)
        losses_out.append(loss)

        beta = np.maximum(beta - lr * g_beta, 0.0)
        alpha = np.maximum(alpha - lr * g_alpha, 0.0)
        big_b = np.clip(big_b - lr * g_bigb, 0.0, 1.0)
        if cfg.fit_theta_f:
            theta = theta - lr * g_theta

    final = PhysicalParams(
        beta=beta, alpha=alpha, big_b=big_b, q=init.q,
        kernel_size=init.kernel_size, theta_f=theta,
    )
    return LossTrace(
        epochs=np.array(epochs_out),
        learning_rates=np.array(lrs_out),
        losses=np.array(losses_out),
        final_params=final,
    )


# ---------------------------------------------------------------------------
# manifest and trace files
# ---------------------------------------------------------------------------

def load_manifest(path: str) -> list[tuple[RgbImage, DepthMap, RgbImage]]:
    """Read a JSON manifest of (rgb, depth, target) file triples.

    Format: {"pairs": [{"rgb": ..., "depth": ..., "target": ...}, ...]}
    with paths resolved relative to the manifest's directory.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such manifest: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed manifest JSON: {exc}") from exc
    entries = doc.get("pairs") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ValueError("manifest must list at least one pair")
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    for i, entry in enumerate(entries):
        try:
            rgb_path = os.path.join(base, entry["rgb"])
            depth_path = os.path.join(base, entry["depth"])
            target_path = os.path.join(base, entry["target"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"manifest entry {i} missing field: {exc}") from exc
        pairs.append((load_rgb(rgb_path), load_depth(depth_path), load_rgb(target_path)))
    return pairs


def write_loss_trace(trace: LossTrace, path: str) -> None:
    """Write the per-epoch trace as CSV with columns epoch, lr, loss."""
    lines = ["epoch,lr,loss"]
    for epoch, lr, loss in zip(trace.epochs, trace.learning_rates, trace.losses):
        lines.append(f"{int(epoch)},{float(lr)!r},{float(loss)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
