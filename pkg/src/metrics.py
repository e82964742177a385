"""
Segmentation and classification metrics and the challenge overall score.

Dice and NSD work on integer class masks. NSD boundaries are class pixels
4-adjacent to a non-class pixel or to the image border; distances are
Euclidean. The brute-force NSD is the reference; nsd_fast uses an exact
distance transform and returns the same value.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from src.errors import DimensionError, ParameterError
from src.models.eval_report import EvalReport
from src.models.sample import N_CHD_CLASSES, N_SEG_CLASSES

logger = logging.getLogger(__name__)

SCORE_WEIGHTS = (0.5, 0.25, 0.25)

# Leaderboard (F1, DSC, NSD, Overall) rows for the five pipeline variants:
# baseline, + boundary refinement, + prototype filtering, + hard masking
# and EMA, + classification fine-tuning.
LEADERBOARD_ROWS = (
    (34.20, 65.48, 45.55, 44.86),
    (28.44, 75.92, 56.62, 47.36),
    (39.03, 74.71, 54.76, 51.88),
    (25.25, 80.04, 61.54, 48.02),
    (41.20, 79.99, 61.62, 56.00),
)

AVERAGING_MODES = ("per_image", "pooled")

CROSS = ndimage.generate_binary_structure(2, 1)


def _check_dims(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")


# ============================================================
# Region overlap
# ============================================================

def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    _check_dims(pred, gt)
    p = pred == cls
    g = gt == cls
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


# ============================================================
# Surface distance
# ============================================================

def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of a boolean region that touch a non-region pixel or the border."""
    if not region.any():
        return np.zeros_like(region, dtype=bool)
    interior = ndimage.binary_erosion(region, structure=CROSS, border_value=0)
    return region & ~interior


def _nsd_from_counts(close_p: int, close_g: int, n_p: int, n_g: int) -> float:
    return (close_p + close_g) / (n_p + n_g)


def nsd(pred: np.ndarray, gt: np.ndarray, cls: int, tolerance: float = 2.0) -> float:
    """
    Normalized surface distance by exact pairwise distances.

    Both empty -> 1.0; exactly one empty -> 0.0.

    Raises:
        ParameterError: if tolerance is negative
    """
    _check_dims(pred, gt)
    if tolerance < 0:
        raise ParameterError(f"nsd tolerance must be >= 0, got {tolerance}")
    bp = np.argwhere(boundary(pred == cls))
    bg = np.argwhere(boundary(gt == cls))
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    d = cdist(bp.astype(np.float64), bg.astype(np.float64))
    close_p = int(np.count_nonzero(d.min(axis=1) <= tolerance))
    close_g = int(np.count_nonzero(d.min(axis=0) <= tolerance))
    return _nsd_from_counts(close_p, close_g, len(bp), len(bg))


def nsd_fast(pred: np.ndarray, gt: np.ndarray, cls: int, tolerance: float = 2.0) -> float:
    """Distance-transform NSD; identical to nsd on integer grids."""
    _check_dims(pred, gt)
    if tolerance < 0:
        raise ParameterError(f"nsd tolerance must be >= 0, got {tolerance}")
    bp = boundary(pred == cls)
    bg = boundary(gt == cls)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    close_p = int(np.count_nonzero(to_g[bp] <= tolerance))
    close_g = int(np.count_nonzero(to_p[bg] <= tolerance))
    return _nsd_from_counts(close_p, close_g, n_p, n_g)


# ============================================================
# Classification
# ============================================================

def confusion_matrix(pred_labels: Sequence[int], gt_labels: Sequence[int], n_classes: int = N_CHD_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"{pred.shape[0]} predictions for {gt.shape[0]} labels")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes):
        raise ParameterError(f"labels must be in [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (gt, pred), 1)
    return matrix


def macro_f1(pred_labels: Sequence[int], gt_labels: Sequence[int], n_classes: int = N_CHD_CLASSES) -> float:
    """
    Unweighted mean of per-class F1.

    Classes absent from both predictions and ground truth are excluded;
    0/0 precision or recall counts as 0.
    """
    matrix = confusion_matrix(pred_labels, gt_labels, n_classes)
    tp = np.diag(matrix).astype(np.float64)
    predicted = matrix.sum(axis=0)
    actual = matrix.sum(axis=1)
    scores = []
    for c in range(n_classes):
        if predicted[c] == 0 and actual[c] == 0:
            continue
        precision = tp[c] / predicted[c] if predicted[c] else 0.0
        recall = tp[c] / actual[c] if actual[c] else 0.0
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    if not scores:
        return 0.0
    return float(np.mean(scores))


# ============================================================
# Overall score
# ============================================================

def overall_score(f1_pct: float, dsc_pct: float, nsd_pct: float) -> float:
    w_f1, w_dsc, w_nsd = SCORE_WEIGHTS
    return w_f1 * f1_pct + w_dsc * dsc_pct + w_nsd * nsd_pct


def fit_overall_weights(rows: Sequence[Sequence[float]] = LEADERBOARD_ROWS) -> np.ndarray:
    """
    Least-squares weights (F1, DSC, NSD) reproducing the Overall column.

    Returns:
        Array of three weights
    """
    table = np.asarray(rows, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != 4 or table.shape[0] < 3:
        raise ParameterError(f"need at least 3 rows of (F1, DSC, NSD, Overall), got {table.shape}")
    weights, *_ = np.linalg.lstsq(table[:, :3], table[:, 3], rcond=None)
    logger.debug(f"Fitted overall-score weights: {weights}")
    return weights


# ============================================================
# Split evaluation
# ============================================================

def evaluate(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    pred_chd: Sequence[int],
    gt_chd: Sequence[int],
    tolerance: float = 2.0,
    averaging: str = "per_image",
    pred_views: Optional[Sequence[int]] = None,
    gt_views: Optional[Sequence[int]] = None,
    illegal_pixels: int = 0,
    fast: bool = True,
) -> EvalReport:
    """
    Score a split.

    per_image: each foreground class is scored per image (skipping images
    where it is absent from both masks) and averaged, then averaged over
    classes. pooled: each class is scored once over all pixels of the split.
    Both-empty classes never enter a mean; a class found only in the
    prediction is a false positive and scores 0 for that image.
    """
    if averaging not in AVERAGING_MODES:
        raise ParameterError(f"averaging must be one of {AVERAGING_MODES}, got '{averaging}'")
    if len(pred_masks) != len(gt_masks):
        raise DimensionError(f"{len(pred_masks)} predictions for {len(gt_masks)} masks")
    surface = nsd_fast if fast else nsd

    per_dice: dict[int, list] = {}
    per_nsd: dict[int, list] = {}
    if averaging == "per_image":
        for pred, gt in zip(pred_masks, gt_masks):
            for c in range(1, N_SEG_CLASSES):
                if not ((pred == c).any() or (gt == c).any()):
                    continue
                per_dice.setdefault(c, []).append(dice(pred, gt, c))
                per_nsd.setdefault(c, []).append(surface(pred, gt, c, tolerance))
    else:
        for c in range(1, N_SEG_CLASSES):
            pairs = [(p, g) for p, g in zip(pred_masks, gt_masks) if (p == c).any() or (g == c).any()]
            if not pairs:
                continue
            inter = sum(int(np.count_nonzero((p == c) & (g == c))) for p, g in pairs)
            total = sum(int(np.count_nonzero(p == c)) + int(np.count_nonzero(g == c)) for p, g in pairs)
            per_dice[c] = [2.0 * inter / total]
            per_nsd[c] = [float(np.mean([surface(p, g, c, tolerance) for p, g in pairs]))]

    class_dice = {c: 100.0 * float(np.mean(v)) for c, v in sorted(per_dice.items())}
    class_nsd = {c: 100.0 * float(np.mean(v)) for c, v in sorted(per_nsd.items())}
    dice_mean = float(np.mean(list(class_dice.values()))) if class_dice else 100.0
    nsd_mean = float(np.mean(list(class_nsd.values()))) if class_nsd else 100.0
    f1 = 100.0 * macro_f1(pred_chd, gt_chd)

    view_accuracy = None
    if pred_views is not None and gt_views is not None and len(gt_views):
        view_accuracy = 100.0 * float(np.mean(np.asarray(pred_views) == np.asarray(gt_views)))

    return EvalReport(
        per_class_dice=class_dice,
        dice_mean=dice_mean,
        per_class_nsd=class_nsd,
        nsd_mean=nsd_mean,
        macro_f1=f1,
        overall=overall_score(f1, dice_mean, nsd_mean),
        confusion=confusion_matrix(pred_chd, gt_chd).tolist(),
        view_accuracy=view_accuracy,
        illegal_pixels=illegal_pixels,
        n_images=len(gt_masks),
    )
