"""
Seeded synthetic fetal cardiac phantoms and their on-disk dataset format.

Layout:
    root/manifest.json
    root/{split}/{id}.img.pgm   16-bit image
    root/{split}/{id}.mask.pgm  8-bit class mask
    root/{split}/{id}.json      {"view", "chd", "labeled"}
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from src.anatomy_mask import allowed_categories
from src.errors import DataError, ParameterError, ParseError
from src.models.sample import (
    N_CHD_CLASSES,
    N_SEG_CLASSES,
    N_VIEWS,
    DatasetManifest,
    ManifestEntry,
    Sample,
    View,
)
from src.utils.pgm import read_pgm, write_pgm
from src.utils.seeding import stream

logger = logging.getLogger(__name__)

SPLIT_LABELED = "train_labeled"
SPLIT_UNLABELED = "train_unlabeled"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLITS = (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_VAL, SPLIT_TEST)

MANIFEST_NAME = "manifest.json"
IMAGE_MAXVAL = 65535

# class 0 "normal" at 40%, the six anomalies share the rest
CHD_PRIOR = np.array([0.4] + [0.1] * 6)

# radius multipliers for the first two drawn structures, per CHD class
CHD_SCALES = {
    0: (1.0, 1.0),
    1: (1.35, 1.0),
    2: (0.65, 1.0),
    3: (1.0, 1.35),
    4: (1.0, 0.65),
    5: (1.35, 0.65),
    6: (0.65, 1.35),
}

BACKGROUND_LEVEL = 0.12
ANNULUS_MIN_CLASS = 9


@dataclass(frozen=True)
class PhantomSpec:
    """Rendering parameters shared by every phantom of a dataset."""
    size: int = 64
    noise_var: float = 0.05
    shadow_prob: float = 0.3

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise ParameterError(f"phantom size must be a positive multiple of 16, got {self.size}")
        if self.noise_var < 0 or not 0 <= self.shadow_prob <= 1:
            raise ParameterError("noise_var must be >= 0 and shadow_prob in [0, 1]")


@dataclass(frozen=True)
class SplitCounts:
    """Number of samples per split."""
    labeled: int = 200
    unlabeled: int = 400
    val: int = 100
    test: int = 100

    def __post_init__(self):
        if min(self.labeled, self.unlabeled, self.val, self.test) <= 0:
            raise ParameterError("every split count must be > 0")

    def as_dict(self) -> dict[str, int]:
        return {SPLIT_LABELED: self.labeled, SPLIT_UNLABELED: self.unlabeled,
                SPLIT_VAL: self.val, SPLIT_TEST: self.test}


def structure_intensity(cls: int) -> float:
    return 0.45 + 0.035 * cls


# ============================================================
# Rendering
# ============================================================

def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(
    seed: int,
    view: View,
    chd: int,
    spec: Optional[PhantomSpec] = None,
    sample_id: Optional[str] = None,
    labeled: bool = True,
) -> Sample:
    """
    Render one phantom.

    Draws 2-5 ellipse or annulus structures from the view's permitted
    classes, perturbs the first two radii by the CHD class, then applies
    multiplicative speckle and an optional shadow band to the image only.

    Args:
        seed: sample seed; (seed, view, chd) fixes the output bit-for-bit
        view: standard view
        chd: CHD class in [0, 6]
        spec: rendering parameters

    Returns:
        Sample with image in [0, 1] and a mask obeying the view's classes
    """
    spec = spec or PhantomSpec()
    if not 0 <= chd < N_CHD_CLASSES:
        raise ParameterError(f"chd class must be in [0, {N_CHD_CLASSES - 1}], got {chd}")
    rng = stream(seed, view.value, chd)
    size = spec.size

    pool = sorted(allowed_categories(view) - {0})
    count = int(rng.integers(2, min(5, len(pool)) + 1))
    classes = sorted(int(c) for c in rng.choice(pool, size=count, replace=False))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.int64)
    levels = np.full((size, size), BACKGROUND_LEVEL)
    scales = CHD_SCALES[chd]
    max_radius = 0.16 * size

    for slot, cls in enumerate(classes):
        angle = 2 * np.pi * slot / count + rng.uniform(-0.2, 0.2)
        dist = 0.22 * size
        cy = size / 2 + dist * np.sin(angle)
        cx = size / 2 + dist * np.cos(angle)
        ry, rx = rng.uniform(0.08, 0.13, size=2) * size
        factor = scales[slot] if slot < 2 else 1.0
        ry = min(ry * factor, max_radius)
        rx = min(rx * factor, max_radius)

        region = _ellipse(yy, xx, cy, cx, ry, rx)
        if cls >= ANNULUS_MIN_CLASS:
            region &= ~_ellipse(yy, xx, cy, cx, ry * 0.5, rx * 0.5)
        mask[region] = cls
        levels[region] = structure_intensity(cls)

    image = levels
    if spec.noise_var > 0:
        shape = 1.0 / spec.noise_var
        image = image * rng.gamma(shape, spec.noise_var, size=image.shape)
    if rng.random() < spec.shadow_prob:
        band = max(1, size // 8)
        x0 = int(rng.integers(0, size - band + 1))
        image = image.copy()
        image[:, x0:x0 + band] *= 0.4
    image = np.clip(image, 0.0, 1.0)

    return Sample(
        id=sample_id or f"phantom-{seed}",
        image=image[None].astype(np.float32),
        mask=mask,
        view=view,
        chd=chd,
        labeled=labeled,
    )


def draw_chd_classes(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n CHD classes from the skewed prior."""
    return rng.choice(N_CHD_CLASSES, size=n, p=CHD_PRIOR)


# ============================================================
# Dataset generation and I/O
# ============================================================

def plan_dataset(root: Union[str, Path], counts: SplitCounts, seed: int) -> tuple[DatasetManifest, dict[str, int]]:
    """
    Decide ids, views, CHD classes and per-sample seeds without rendering.

    Returns:
        (manifest, id -> sample seed)
    """
    entries: list[ManifestEntry] = []
    seeds: dict[str, int] = {}
    for split, n in counts.as_dict().items():
        rng = stream(seed, "labels", split)
        views = rng.integers(0, N_VIEWS, size=n)
        chds = draw_chd_classes(rng, n)
        for i in range(n):
            sample_id = f"{split}-{i:05d}"
            entries.append(ManifestEntry(
                id=sample_id,
                split=split,
                view=View.from_index(int(views[i])),
                chd=int(chds[i]),
                labeled=split != SPLIT_UNLABELED,
            ))
            seeds[sample_id] = int(stream(seed, "sample", split, i).integers(0, 2 ** 31 - 1))
    return DatasetManifest(root=Path(root), seed=seed, entries=entries), seeds


def generate_dataset(
    root: Union[str, Path],
    counts: Optional[SplitCounts] = None,
    seed: int = 0,
    spec: Optional[PhantomSpec] = None,
    jobs: int = 1,
) -> DatasetManifest:
    """
    Generate and write a phantom dataset.

    Raises:
        DataError: if the files cannot be written
    """
    counts = counts or SplitCounts()
    spec = spec or PhantomSpec()
    manifest, seeds = plan_dataset(root, counts, seed)

    def render(entry: ManifestEntry) -> Sample:
        return generate_phantom(seeds[entry.id], entry.view, entry.chd, spec, entry.id, entry.labeled)

    logger.info(f"Generating {len(manifest.entries)} phantoms into {manifest.root}")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(render, manifest.entries))
    else:
        samples = [render(e) for e in manifest.entries]

    write_dataset(manifest, samples)
    return manifest


def _sample_paths(root: Path, split: str, sample_id: str) -> tuple[Path, Path, Path]:
    folder = root / split
    return folder / f"{sample_id}.img.pgm", folder / f"{sample_id}.mask.pgm", folder / f"{sample_id}.json"


def write_sample(root: Path, split: str, sample: Sample) -> None:
    """Write one sample's image, mask and JSON sidecar."""
    img_path, mask_path, meta_path = _sample_paths(root, split, sample.id)
    img_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.clip(sample.image[0].astype(np.float64), 0.0, 1.0) * IMAGE_MAXVAL)
    write_pgm(img_path, pixels.astype(np.int64), IMAGE_MAXVAL)
    mask = sample.mask if sample.mask is not None else np.zeros(sample.image.shape[1:], dtype=np.int64)
    write_pgm(mask_path, mask, 255)
    sidecar = {"view": sample.view.value, "chd": sample.chd, "labeled": sample.labeled}
    meta_path.write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")


def write_dataset(manifest: DatasetManifest, samples: Iterable[Sample]) -> None:
    """
    Write samples and manifest.json under manifest.root.

    Raises:
        DataError: on I/O failure or when a sample is not in the manifest
    """
    root = manifest.root
    try:
        root.mkdir(parents=True, exist_ok=True)
        split_of = {e.id: e.split for e in manifest.entries}
        written = 0
        for sample in samples:
            if sample.id not in split_of:
                raise DataError(f"sample {sample.id} is not listed in the manifest")
            write_sample(root, split_of[sample.id], sample)
            written += 1
        (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=1), encoding="utf-8")
    except OSError as e:
        raise DataError(f"failed to write dataset under {root}: {e}")
    logger.info(f"Wrote {written} samples to {root}")


def read_dataset(root: Union[str, Path]) -> DatasetManifest:
    """
    Load manifest.json and check that every referenced file exists.

    Raises:
        DataError: if the manifest or a sample file is missing
        ParseError: if manifest.json is malformed
    """
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(path, e.pos, e.msg)
    try:
        entries = [ManifestEntry.from_dict(d) for d in data["samples"]]
        manifest = DatasetManifest(root=root, seed=int(data["seed"]), entries=entries)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, 0, f"invalid manifest structure: {e}")

    for entry in manifest.entries:
        for file in _sample_paths(root, entry.split, entry.id):
            if not file.exists():
                raise DataError(f"manifest references missing file {file}")
    return manifest


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """
    Read one sample from disk.

    Raises:
        ParseError: for malformed files or mask classes above 14
    """
    entry = manifest.entry(sample_id)
    img_path, mask_path, meta_path = _sample_paths(manifest.root, entry.split, sample_id)

    pixels, maxval = read_pgm(img_path)
    mask, _ = read_pgm(mask_path)
    if mask.size and mask.max() >= N_SEG_CLASSES:
        flat = int(np.argmax(mask.reshape(-1) >= N_SEG_CLASSES))
        header = len(mask_path.read_bytes()) - mask.size
        raise ParseError(mask_path, header + flat, f"mask class {int(mask.reshape(-1)[flat])} exceeds {N_SEG_CLASSES - 1}")
    if mask.shape != pixels.shape:
        raise ParseError(mask_path, 0, f"mask shape {mask.shape} differs from image {pixels.shape}")

    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        view = View.parse(meta["view"])
        chd = meta.get("chd")
        labeled = bool(meta.get("labeled", entry.labeled))
    except json.JSONDecodeError as e:
        raise ParseError(meta_path, e.pos, e.msg)
    except (KeyError, ParameterError) as e:
        raise ParseError(meta_path, 0, f"invalid sidecar: {e}")

    image = (pixels.astype(np.float64) / maxval)[None].astype(np.float32)
    return Sample(id=sample_id, image=image, mask=mask, view=view,
                  chd=None if chd is None else int(chd), labeled=labeled)


def load_split(manifest: DatasetManifest, split: str) -> list[Sample]:
    """Read every sample of a split in manifest order."""
    return [load_sample(manifest, sample_id) for sample_id in manifest.ids(split)]
