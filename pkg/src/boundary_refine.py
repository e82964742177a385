"""
Box-prompted boundary refinement of segmentation pseudo-labels.

Loop: initial mask -> per-class component boxes -> refiner -> IoU gate.
The refiner is an injectable dependency; MorphRefiner is a deterministic
morphological stand-in for a promptable segmentation foundation model.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from scipy import ndimage

from src.errors import ConfigurationError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

# 4-connectivity
CROSS = ndimage.generate_binary_structure(2, 1)

GATE_MODES = ("per_class", "whole")


@dataclass(frozen=True)
class Box:
    """Inclusive pixel bounds of one connected component of a class."""
    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ParameterError(f"degenerate box {self}")
        if min(self.x0, self.y0) < 0:
            raise ParameterError(f"box {self} starts outside the image")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1 + 1), slice(self.x0, self.x1 + 1)

    def fits(self, shape: tuple) -> bool:
        return self.y1 < shape[0] and self.x1 < shape[1]


class RefinerProtocol(Protocol):
    """Produces a candidate mask from an image, an initial mask and box prompts."""

    def refine(self, image: np.ndarray, init_mask: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
        ...


@dataclass
class GateDecision:
    """Per-class outcome of the IoU gate."""
    class_id: int
    iou: float
    adopted: bool
    overlap_pixels: int = 0


@dataclass
class RefinementResult:
    """Selected mask plus the boxes and gate decisions that produced it."""
    selected: np.ndarray
    refined: np.ndarray
    boxes: list = field(default_factory=list)
    decisions: list = field(default_factory=list)


# ============================================================
# Step 2: boxes
# ============================================================

def extract_boxes(mask: np.ndarray, min_area: int = 4) -> list[Box]:
    """
    One box per 4-connected component of every nonzero class.

    Components smaller than min_area are skipped. Boxes are ordered by
    class, then y0, then x0.
    """
    if min_area < 1:
        raise ParameterError(f"min_area must be >= 1, got {min_area}")
    boxes: list[Box] = []
    for cls in np.unique(mask):
        if cls == 0:
            continue
        labels, count = ndimage.label(mask == cls, structure=CROSS)
        if count == 0:
            continue
        areas = np.bincount(labels.reshape(-1), minlength=count + 1)
        for index, found in enumerate(ndimage.find_objects(labels), start=1):
            if found is None or areas[index] < min_area:
                continue
            ys, xs = found
            boxes.append(Box(int(cls), xs.start, ys.start, xs.stop - 1, ys.stop - 1))
    boxes.sort(key=lambda b: (b.class_id, b.y0, b.x0))
    return boxes


# ============================================================
# Step 3: stub refiner
# ============================================================

def otsu_threshold(values: np.ndarray) -> Optional[float]:
    """
    Exact Otsu split over the distinct values; None when the values are constant.

    Pixels strictly above the returned threshold are foreground.
    """
    levels, counts = np.unique(np.asarray(values, dtype=np.float64).reshape(-1), return_counts=True)
    if levels.shape[0] < 2:
        return None
    total = counts.sum()
    weights = counts / total
    w0 = np.cumsum(weights)[:-1]
    w1 = 1.0 - w0
    sums = np.cumsum(weights * levels)
    mu0 = sums[:-1] / w0
    mu1 = (sums[-1] - sums[:-1]) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(levels[int(np.argmax(between))])


def _fill_small_holes(region: np.ndarray, max_hole_area: int) -> np.ndarray:
    filled = ndimage.binary_fill_holes(region, structure=CROSS)
    holes = filled & ~region
    if not holes.any():
        return region
    labels, count = ndimage.label(holes, structure=CROSS)
    areas = np.bincount(labels.reshape(-1), minlength=count + 1)
    small = np.isin(labels, np.nonzero(areas <= max_hole_area)[0]) & (labels > 0)
    return region | small


def _largest_component(region: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(region, structure=CROSS)
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.reshape(-1), minlength=count + 1)
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


@dataclass
class MorphRefiner:
    """
    Per box: Otsu threshold over the boxed component and background pixels,
    keep the largest 4-connected foreground component touching the
    component, and restore small holes the initial mask labeled as the class.

    Pixels of other classes, other components of the same class and pixels
    outside every box are never changed. A box without contrast is left as is.
    """
    max_hole_area: int = 8

    def refine(self, image: np.ndarray, init_mask: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
        plane = image[0] if image.ndim == 3 else image
        if plane.shape != init_mask.shape:
            raise DimensionError(f"image {plane.shape} vs mask {init_mask.shape}")
        out = init_mask.copy()
        for box in boxes:
            if not box.fits(init_mask.shape):
                raise ParameterError(f"box {box} exceeds mask {init_mask.shape}")
            ys, xs = box.slices
            region_img = plane[ys, xs]
            region_init = init_mask[ys, xs]
            own = _largest_component(region_init == box.class_id)
            editable = own | (region_init == 0)

            threshold = otsu_threshold(region_img[editable])
            if threshold is None:
                continue
            fg = (region_img > threshold) & editable
            labels, count = ndimage.label(fg, structure=CROSS)
            touching = np.unique(labels[own & (labels > 0)])
            keep = np.zeros_like(own)
            if touching.size:
                sizes = np.bincount(labels.reshape(-1), minlength=count + 1)
                best = touching[np.argmax(sizes[touching])]
                keep = labels == best
                keep |= _fill_small_holes(keep, self.max_hole_area) & own

            target = out[ys, xs]
            target[own & ~keep] = 0
            target[keep] = box.class_id
        return out


def build_refiner(selection: str) -> RefinerProtocol:
    """
    Create the refiner named by a config value.

    Raises:
        ConfigurationError: for unknown or test-only selections
    """
    if selection == "stub":
        return MorphRefiner()
    if selection.startswith("oracle"):
        raise ConfigurationError("the oracle refiner is a test utility and cannot be used for training")
    raise ConfigurationError(f"unknown refiner '{selection}'")


# ============================================================
# Step 4: IoU gate
# ============================================================

def iou(a: np.ndarray, b: np.ndarray, cls: int) -> float:
    """|a==c & b==c| / |a==c | b==c|, 1.0 when both are empty."""
    if a.shape != b.shape:
        raise DimensionError(f"iou: shapes {a.shape} and {b.shape} differ")
    pa = a == cls
    pb = b == cls
    union = int(np.count_nonzero(pa | pb))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(pa & pb)) / union


def iou_gate(
    init: np.ndarray,
    refined: np.ndarray,
    theta_iou: float,
    mode: str = "per_class",
) -> tuple[np.ndarray, list[GateDecision]]:
    """
    Adopt refined class regions whose IoU with the initial mask reaches theta.

    Per-class mode decides each class independently; overlapping adopted
    regions go to the lowest class index. Whole mode adopts the refined
    mask entirely iff the mean IoU over present classes reaches theta.
    """
    if init.shape != refined.shape:
        raise DimensionError(f"iou_gate: shapes {init.shape} and {refined.shape} differ")
    if mode not in GATE_MODES:
        raise ConfigurationError(f"gate mode must be one of {GATE_MODES}, got '{mode}'")
    theta = min(max(float(theta_iou), 0.0), 1.0)

    classes = sorted(int(c) for c in np.union1d(np.unique(init), np.unique(refined)) if c != 0)
    scores = {c: iou(init, refined, c) for c in classes}

    if mode == "whole":
        mean = float(np.mean(list(scores.values()))) if scores else 1.0
        adopt = mean >= theta
        decisions = [GateDecision(c, scores[c], adopt) for c in classes]
        return (refined.copy() if adopt else init.copy()), decisions

    selected = np.zeros_like(init)
    taken = np.zeros(init.shape, dtype=bool)
    decisions = []
    for c in classes:
        adopt = scores[c] >= theta
        region = (refined == c) if adopt else (init == c)
        overlap = region & taken
        selected[region & ~taken] = c
        taken |= region
        decisions.append(GateDecision(c, scores[c], adopt, int(np.count_nonzero(overlap))))
    return selected, decisions


def refine_pseudo_label(
    image: np.ndarray,
    init_mask: np.ndarray,
    refiner: RefinerProtocol,
    theta_iou: float = 0.5,
    min_area: int = 4,
    mode: str = "per_class",
) -> RefinementResult:
    """Run the box -> refine -> gate loop on one initial mask."""
    boxes = extract_boxes(init_mask, min_area)
    if not boxes:
        return RefinementResult(selected=init_mask.copy(), refined=init_mask.copy())
    refined = refiner.refine(image, init_mask, boxes)
    selected, decisions = iou_gate(init_mask, refined, theta_iou, mode)
    return RefinementResult(selected=selected, refined=refined, boxes=boxes, decisions=decisions)


# ============================================================
# Audit log
# ============================================================

REFINE_AUDIT_HEADER = ["sample_id", "class", "x0", "y0", "x1", "y1", "iou", "adopted"]


def audit_rows(sample_id: str, result: RefinementResult) -> list[list]:
    """One CSV row per box with its class's gate decision."""
    by_class = {d.class_id: d for d in result.decisions}
    rows = []
    for box in result.boxes:
        decision = by_class.get(box.class_id)
        if decision is None:
            continue
        rows.append([sample_id, box.class_id, box.x0, box.y0, box.x1, box.y1,
                     f"{decision.iou:.6f}", int(decision.adopted)])
    return rows


def write_refine_audit(path: Union[str, Path], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REFINE_AUDIT_HEADER)
        writer.writerows(rows)
