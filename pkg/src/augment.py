"""
Weak (geometric) and strong (photometric) augmentation, and CutMix.

Weak and strong views of one sample share the same geometry: strong views
are produced from the weak view by photometric changes only, so weak-view
pseudo-labels transfer pixel for pixel.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from src.errors import DimensionError
from src.models.sample import Sample

logger = logging.getLogger(__name__)

MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.9, 1.1)
INTENSITY_RANGE = (0.7, 1.3)
OFFSET_RANGE = (-0.1, 0.1)
GAMMA_RANGE = (0.7, 1.4)


@dataclass(frozen=True)
class Geometry:
    """Shared geometric draw: horizontal flip, rotation in degrees, isotropic scale."""
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle == 0.0 and self.scale == 1.0


@dataclass(frozen=True)
class Photometric:
    """Strong-view intensity draw."""
    intensity: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0


@dataclass
class AugmentedPair:
    """Weak view plus two strong views, all with the same geometry."""
    weak: Sample
    strong1: Sample
    strong2: Sample
    geometry: Geometry


@dataclass
class CutMixResult:
    """
    Mixed sample with its box (y0, x0, y1, x1; exclusive ends).

    lam is the fraction of pixels kept from the first parent.
    """
    mixed: Sample
    lam: float
    box: tuple
    region_b: np.ndarray


def draw_geometry(rng: np.random.Generator) -> Geometry:
    return Geometry(
        flip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
    )


def draw_photometric(rng: np.random.Generator) -> Photometric:
    return Photometric(
        intensity=float(rng.uniform(*INTENSITY_RANGE)),
        offset=float(rng.uniform(*OFFSET_RANGE)),
        gamma=float(rng.uniform(*GAMMA_RANGE)),
    )


def border_level(image: np.ndarray) -> float:
    """Median of the outermost ring, the background level of a phantom."""
    ring = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    return float(np.median(ring))


def _affine(array: np.ndarray, geometry: Geometry, order: int, fill: float = 0.0) -> np.ndarray:
    """Rotate/scale a 2D array about its centre; uncovered pixels become fill."""
    h, w = array.shape
    theta = np.deg2rad(geometry.angle)
    # output -> input mapping: inverse rotation and inverse scale
    inverse = np.array([[np.cos(theta), np.sin(theta)],
                        [-np.sin(theta), np.cos(theta)]]) / geometry.scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - inverse @ centre
    return ndimage.affine_transform(array, inverse, offset=offset, order=order, mode="constant", cval=fill)


def apply_geometry(sample: Sample, geometry: Geometry) -> Sample:
    """
    Apply a geometric draw; bilinear for the image, nearest for the mask.

    Canvas size is preserved. Uncovered image pixels take the border
    level and uncovered mask pixels are class 0.
    """
    if geometry.is_identity:
        return replace(sample, image=sample.image.copy(),
                       mask=None if sample.mask is None else sample.mask.copy())

    image = sample.image[0]
    mask = sample.mask
    if geometry.flip:
        image = image[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    if geometry.angle != 0.0 or geometry.scale != 1.0:
        image = _affine(image.astype(np.float64), geometry, order=1, fill=border_level(image))
        mask = None if mask is None else _affine(mask, geometry, order=0)
    image = np.clip(image, 0.0, 1.0)

    return replace(
        sample,
        image=np.ascontiguousarray(image)[None].astype(np.float32),
        mask=None if mask is None else np.ascontiguousarray(mask).astype(np.int64),
    )


def weak_augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Flip (p=0.5), rotate within +-10 degrees and scale in [0.9, 1.1]."""
    return apply_geometry(sample, draw_geometry(rng))


def apply_photometric(sample: Sample, params: Photometric) -> Sample:
    """Intensity scale, additive offset and gamma, clamped to [0, 1]; mask untouched."""
    x = sample.image.astype(np.float64)
    x = np.clip(params.intensity * x + params.offset, 0.0, 1.0)
    x = np.clip(x ** params.gamma, 0.0, 1.0)
    return replace(sample, image=x.astype(np.float32))


def strong_augment(sample: Sample, rng: np.random.Generator) -> Sample:
    return apply_photometric(sample, draw_photometric(rng))


def make_augmented_pair(sample: Sample, rng: np.random.Generator) -> AugmentedPair:
    """Weak view plus two strong views with independent photometric draws."""
    geometry = draw_geometry(rng)
    weak = apply_geometry(sample, geometry)
    return AugmentedPair(
        weak=weak,
        strong1=strong_augment(weak, rng),
        strong2=strong_augment(weak, rng),
        geometry=geometry,
    )


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> tuple:
    """Box with area fraction about (1 - lam), placed uniformly inside the canvas."""
    cut = np.sqrt(max(0.0, 1.0 - lam))
    cut_h = int(round(height * cut))
    cut_w = int(round(width * cut))
    y0 = int(rng.integers(0, height - cut_h + 1))
    x0 = int(rng.integers(0, width - cut_w + 1))
    return y0, x0, y0 + cut_h, x0 + cut_w


def paste_box(a: np.ndarray, b: np.ndarray, box: tuple) -> np.ndarray:
    """Copy b's box region into a copy of a (last two axes are H, W)."""
    y0, x0, y1, x1 = box
    out = a.copy()
    out[..., y0:y1, x0:x1] = b[..., y0:y1, x0:x1]
    return out


def cutmix_with_lambda(a: Sample, b: Sample, lam: float, rng: np.random.Generator) -> CutMixResult:
    """CutMix for a given draw; the returned lam is the exact kept fraction of a."""
    if a.image.shape != b.image.shape:
        raise DimensionError(f"cutmix parents differ: {a.image.shape} vs {b.image.shape}")
    h, w = a.image.shape[1:]
    box = cutmix_box(h, w, lam, rng)
    y0, x0, y1, x1 = box
    region_b = np.zeros((h, w), dtype=bool)
    region_b[y0:y1, x0:x1] = True

    mask = None
    if a.mask is not None and b.mask is not None:
        mask = paste_box(a.mask, b.mask, box)
    mixed = replace(a, id=f"{a.id}+{b.id}", image=paste_box(a.image, b.image, box), mask=mask)
    kept = 1.0 - (y1 - y0) * (x1 - x0) / float(h * w)
    return CutMixResult(mixed=mixed, lam=kept, box=box, region_b=region_b)


def cutmix(a: Sample, b: Sample, rng: np.random.Generator) -> CutMixResult:
    """CutMix with lam ~ Beta(1, 1)."""
    return cutmix_with_lambda(a, b, float(rng.beta(1.0, 1.0)), rng)
