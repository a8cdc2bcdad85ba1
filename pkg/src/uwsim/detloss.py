"""Default-patch detection losses over anchor grids.

A fixed multi-layer grid of default patches (anchor boxes) is matched
against ground-truth boxes by IoU, and per-patch class/location
predictions are scored two ways:

- patch loss: mean cross-entropy over ALL patches (background patches
  score against the background class) plus mean smooth-L1 location
  error over the object patches;
- object-focused loss: both terms averaged over object patches only,
  so background patches and their predictions cannot influence it.

Class vectors have C+1 entries with index 0 reserved for background
and object classes numbered 1..C. `loss_gradients` returns the exact
derivative of either loss with respect to every prediction entry.
All coordinates are normalized to the unit square, boxes are in
center-size (cx, cy, w, h) form, and everything here is pure and
deterministic: matching ties break toward the lowest index.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

_LOG_FLOOR = 1e-12
_SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class DefaultPatch:
    """One anchor box: normalized center/extents plus its grid origin."""

    cx: float
    cy: float
    w: float
    h: float
    layer: int = 0
    aspect: int = 0

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError("patch center must lie in the unit square")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError("patch extents must be positive")


@dataclass(frozen=True)
class GtBox:
    """A ground-truth box, clipped to the unit square on construction."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class id must be >= 1 (0 is background)")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError("gt box extents must be positive")
        x0 = self.cx - self.w / 2.0
        y0 = self.cy - self.h / 2.0
        x1 = self.cx + self.w / 2.0
        y1 = self.cy + self.h / 2.0
        x0c, y0c = max(x0, 0.0), max(y0, 0.0)
        x1c, y1c = min(x1, 1.0), min(y1, 1.0)
        if x1c <= x0c or y1c <= y0c:
            raise ValueError("gt box lies outside the unit square")
        if (x0c, y0c, x1c, y1c) != (x0, y0, x1, y1):
            object.__setattr__(self, "cx", (x0c + x1c) / 2.0)
            object.__setattr__(self, "cy", (y0c + y1c) / 2.0)
            object.__setattr__(self, "w", x1c - x0c)
            object.__setattr__(self, "h", y1c - y0c)
        object.__setattr__(self, "class_id", int(self.class_id))


@dataclass(frozen=True)
class Prediction:
    """Per-patch class probabilities (length C+1) and location 4-vector."""

    pcls: np.ndarray
    ploc: np.ndarray

    def __post_init__(self):
        pcls = np.asarray(self.pcls, dtype=np.float64)
        ploc = np.asarray(self.ploc, dtype=np.float64)
        _check_simplex(pcls)
        if ploc.shape != (4,) or not np.all(np.isfinite(ploc)):
            raise ValueError("ploc must be a finite 4-vector")
        object.__setattr__(self, "pcls", pcls)
        object.__setattr__(self, "ploc", ploc)


@dataclass(frozen=True)
class Assignment:
    """A patch's target: background, or a gt's index, class, and box."""

    gt_index: int | None = None
    class_id: int | None = None
    gloc: np.ndarray | None = None

    def __post_init__(self):
        if self.gt_index is None:
            if self.class_id is not None or self.gloc is not None:
                raise ValueError("background assignment carries no target")
            return
        if self.class_id is None or self.class_id < 1 or self.gloc is None:
            raise ValueError("object assignment needs a class id and a box")
        gloc = np.asarray(self.gloc, dtype=np.float64)
        if gloc.shape != (4,):
            raise ValueError("gloc must be a 4-vector")
        object.__setattr__(self, "gloc", gloc)

    @property
    def background(self) -> bool:
        return self.gt_index is None


@dataclass(frozen=True)
class PatchGridConfig:
    """Square grid sizes per layer plus the patch scale ladder.

    Each layer contributes 6 patches per location: its own scale at
    aspect ratios (1, 2, 1/2, 3, 1/3) plus the geometric mean of its
    scale and the next layer's at aspect 1. `scales` therefore needs
    one boundary value beyond the last layer; by default scales run
    linearly from 0.2 to 0.9 with boundary 1.0.
    """

    grids: tuple[int, ...] = (38, 19, 10, 5, 3, 2, 1)
    scales: tuple[float, ...] | None = None
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)

    def __post_init__(self):
        grids = tuple(int(g) for g in self.grids)
        if not grids:
            raise ValueError("at least one grid layer is required")
        if any(g < 1 for g in grids):
            raise ValueError("grid sizes must be positive")
        if self.scales is None:
            ladder = np.linspace(0.2, 0.9, len(grids)) if len(grids) > 1 else np.array([0.2])
            scales = tuple(float(s) for s in ladder) + (1.0,)
        else:
            scales = tuple(float(s) for s in self.scales)
        if len(scales) != len(grids) + 1:
            raise ValueError("scales must provide one value per layer plus a boundary")
        if any(s <= 0 for s in scales) or any(
            scales[i] >= scales[i + 1] for i in range(len(scales) - 1)
        ):
            raise ValueError("scales must be positive and strictly increasing")
        if any(ar <= 0 for ar in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "aspect_ratios", tuple(self.aspect_ratios))

    @property
    def patches_per_location(self) -> int:
        return len(self.aspect_ratios) + 1


@dataclass(frozen=True)
class LossReport:
    """The two loss terms, their sum, and the patch counts behind them."""

    l_cls_term: float
    l_loc_term: float
    total: float
    n: int
    n_bar: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "L_cls_term": self.l_cls_term,
                "L_loc_term": self.l_loc_term,
                "total": self.total,
                "N": self.n,
                "N_bar": self.n_bar,
            },
            indent=2,
        )


@dataclass(frozen=True)
class PredictionGradient:
    """dL/dpcls and dL/dploc for one patch."""

    pcls: np.ndarray
    ploc: np.ndarray


def _check_simplex(pcls: np.ndarray) -> None:
    if pcls.ndim != 1 or pcls.size < 2:
        raise ValueError("pcls must be a vector of at least two classes")
    if not np.all(np.isfinite(pcls)) or np.any(pcls < 0.0):
        raise ValueError("pcls entries must be finite and non-negative")
    if abs(float(pcls.sum()) - 1.0) > _SIMPLEX_TOL:
        raise ValueError("pcls must sum to 1 within 1e-6")


# ---------------------------------------------------------------------------
# patch generation and matching
# ---------------------------------------------------------------------------

def generate_default_patches(cfg: PatchGridConfig = PatchGridConfig()) -> list[DefaultPatch]:
    """Enumerate every anchor: layers, then row-major cells, then aspects."""
    patches = []
    for layer, grid in enumerate(cfg.grids):
        scale = cfg.scales[layer]
        extra = math.sqrt(scale * cfg.scales[layer + 1])
        sizes = [
            (scale * math.sqrt(ar), scale / math.sqrt(ar)) for ar in cfg.aspect_ratios
        ] + [(extra, extra)]
        for row in range(grid):
            cy = (row + 0.5) / grid
            for col in range(grid):
                cx = (col + 0.5) / grid
                for aspect, (w, h) in enumerate(sizes):
                    patches.append(
                        DefaultPatch(cx=cx, cy=cy, w=w, h=h, layer=layer, aspect=aspect)
                    )
    return patches


def iou(a, b) -> float:
    """Intersection over union of two center-size boxes; 0 when disjoint."""
    ax0, ax1 = a.cx - a.w / 2.0, a.cx + a.w / 2.0
    ay0, ay1 = a.cy - a.h / 2.0, a.cy + a.h / 2.0
    bx0, bx1 = b.cx - b.w / 2.0, b.cx + b.w / 2.0
    by0, by1 = b.cy - b.h / 2.0, b.cy + b.h / 2.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union)


def match_patches(
    patches: list[DefaultPatch], gts: list[GtBox], threshold: float = 0.5
) -> list[Assignment]:
    """Assign each patch its best gt above the IoU threshold, or background.

    Afterwards every gt (in index order) force-claims its highest-IoU
    patch among those not already force-claimed, ties broken toward the
    lowest patch index, so no gt goes unrepresented even when all IoUs
    fall below the threshold.
    """
    if not gts:
        return [Assignment() for _ in patches]

    overlaps = np.array([[iou(p, g) for g in gts] for p in patches])

    assigned_gt = np.full(len(patches), -1, dtype=np.int64)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(patches)), best_gt]
    assigned_gt[best_iou > threshold] = best_gt[best_iou > threshold]

    force_claimed: set[int] = set()
    for gt_index in range(len(gts)):
        order = overlaps[:, gt_index]
        best_patch = -1
        best_value = -1.0
        for patch_index in range(len(patches)):
            if patch_index in force_claimed:
                continue
            if order[patch_index] > best_value:
                best_value = order[patch_index]
                best_patch = patch_index
        if best_patch >= 0:
            force_claimed.add(best_patch)
            assigned_gt[best_patch] = gt_index

    assignments = []
    for patch_index in range(len(patches)):
        gt_index = int(assigned_gt[patch_index])
        if gt_index < 0:
            assignments.append(Assignment())
        else:
            gt = gts[gt_index]
            assignments.append(
                Assignment(
                    gt_index=gt_index,
                    class_id=gt.class_id,
                    gloc=np.array([gt.cx, gt.cy, gt.w, gt.h]),
                )
            )
    return assignments


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cls_loss(pcls: np.ndarray, gcls: np.ndarray) -> float:
    """Cross-entropy -sum_c gcls_c log(pcls_c), probabilities floored at 1e-12."""
    pcls = np.asarray(pcls, dtype=np.float64)
    gcls = np.asarray(gcls, dtype=np.float64)
    _check_simplex(pcls)
    if gcls.shape != pcls.shape or not np.all((gcls == 0.0) | (gcls == 1.0)) or gcls.sum() != 1.0:
        raise ValueError("gcls must be one-hot with the same length as pcls")
    return float(-(gcls * np.log(np.maximum(pcls, _LOG_FLOOR))).sum())


def smooth_l1_loc_loss(ploc: np.ndarray, gloc: np.ndarray) -> float:
    """Sum over coordinates of 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    ploc = np.asarray(ploc, dtype=np.float64)
    gloc = np.asarray(gloc, dtype=np.float64)
    if ploc.shape != (4,) or gloc.shape != (4,):
        raise ValueError("locations must be 4-vectors")
    x = ploc - gloc
    ax = np.abs(x)
    return float(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5).sum())


def _one_hot(class_id: int, length: int) -> np.ndarray:
    if not 1 <= class_id <= length - 1:
        raise ValueError(f"class id {class_id} outside 1..{length - 1}")
    vec = np.zeros(length)
    vec[class_id] = 1.0
    return vec


def _background_one_hot(length: int) -> np.ndarray:
    vec = np.zeros(length)
    vec[0] = 1.0
    return vec


def _check_aligned(preds: list[Prediction], assignments: list[Assignment]) -> None:
    if not preds:
        raise ValueError("at least one patch prediction is required")
    if len(preds) != len(assignments):
        raise ValueError("predictions and assignments differ in length")
    length = preds[0].pcls.size
    if any(p.pcls.size != length for p in preds):
        raise ValueError("all pcls vectors must share one length")


def patch_perceptual_loss(
    preds: list[Prediction], assignments: list[Assignment]
) -> LossReport:
    """Mean class loss over all patches plus mean location loss over objects."""
    _check_aligned(preds, assignments)
    length = preds[0].pcls.size
    n = len(preds)
    cls_sum = 0.0
    loc_sum = 0.0
    n_bar = 0
    for pred, assignment in zip(preds, assignments):
        if assignment.background:
            cls_sum += softmax_cls_loss(pred.pcls, _background_one_hot(length))
        else:
            cls_sum += softmax_cls_loss(pred.pcls, _one_hot(assignment.class_id, length))
            loc_sum += smooth_l1_loc_loss(pred.ploc, assignment.gloc)
            n_bar += 1
    l_cls = cls_sum / n
    l_loc = loc_sum / n_bar if n_bar else 0.0
    return LossReport(l_cls_term=l_cls, l_loc_term=l_loc, total=l_cls + l_loc, n=n, n_bar=n_bar)


def object_focused_loss(
    preds: list[Prediction], assignments: list[Assignment]
) -> LossReport:
    """Both loss terms averaged over object patches; background is ignored."""
    _check_aligned(preds, assignments)
    length = preds[0].pcls.size
    cls_sum = 0.0
    loc_sum = 0.0
    n_bar = 0
    for pred, assignment in zip(preds, assignments):
        if assignment.background:
            continue
        cls_sum += softmax_cls_loss(pred.pcls, _one_hot(assignment.class_id, length))
        loc_sum += smooth_l1_loc_loss(pred.ploc, assignment.gloc)
        n_bar += 1
    l_cls = cls_sum / n_bar if n_bar else 0.0
    l_loc = loc_sum / n_bar if n_bar else 0.0
    return LossReport(
        l_cls_term=l_cls, l_loc_term=l_loc, total=l_cls + l_loc, n=len(preds), n_bar=n_bar
    )


def loss_gradients(
    preds: list[Prediction],
    assignments: list[Assignment],
    variant: str = "patch",
) -> list[PredictionGradient]:
    """Exact per-patch derivatives of the chosen loss.

    Cross-entropy contributes -gcls_c / pcls_c on the floored region
    (zero where the probability sits below the floor); smooth L1
    contributes x for |x| < 1 and sign(x) beyond. Both are scaled by
    the variant's normalization. Background patches always get zero
    location gradient, and zero class gradient under object_focused.
    """
    if variant not in ("patch", "object_focused"):
        raise ValueError("variant must be 'patch' or 'object_focused'")
    _check_aligned(preds, assignments)
    length = preds[0].pcls.size
    n = len(preds)
    n_bar = sum(1 for a in assignments if not a.background)

    grads = []
    for pred, assignment in zip(preds, assignments):
        dpcls = np.zeros(length)
        dploc = np.zeros(4)
        if assignment.background:
            if variant == "patch":
                dpcls = _ce_grad(pred.pcls, _background_one_hot(length)) / n
        else:
            gcls = _one_hot(assignment.class_id, length)
            scale = n if variant == "patch" else n_bar
            dpcls = _ce_grad(pred.pcls, gcls) / scale
            x = pred.ploc - assignment.gloc
            dploc = np.where(np.abs(x) < 1.0, x, np.sign(x)) / n_bar
        grads.append(PredictionGradient(pcls=dpcls, ploc=dploc))
    return grads


def _ce_grad(pcls: np.ndarray, gcls: np.ndarray) -> np.ndarray:
    live = pcls > _LOG_FLOOR
    return np.where(live, -gcls / np.where(live, pcls, 1.0), 0.0)


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

def load_scene(path: str) -> tuple[list[GtBox], list[Prediction]]:
    """Read ground-truth boxes and per-patch predictions from JSON."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such scene file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed scene JSON: {exc}") from exc
    if not isinstance(doc, dict) or "gt_boxes" not in doc or "predictions" not in doc:
        raise ValueError("scene must provide 'gt_boxes' and 'predictions'")
    try:
        gts = [
            GtBox(cx=g["cx"], cy=g["cy"], w=g["w"], h=g["h"], class_id=g["class"])
            for g in doc["gt_boxes"]
        ]
        preds = [
            Prediction(pcls=np.asarray(p["pcls"]), ploc=np.asarray(p["ploc"]))
            for p in doc["predictions"]
        ]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"scene entry missing field: {exc}") from exc
    return gts, preds


def write_scene(gts: list[GtBox], preds: list[Prediction], path: str) -> None:
    """Write a scene in the same JSON layout `load_scene` reads."""
    doc = {
        "gt_boxes": [
            {"cx": g.cx, "cy": g.cy, "w": g.w, "h": g.h, "class": g.class_id}
            for g in gts
        ],
        "predictions": [
            {"pcls": p.pcls.tolist(), "ploc": p.ploc.tolist()} for p in preds
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
