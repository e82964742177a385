"""
Sample and dataset manifest dataclasses for the cardiac phantom data.

Samples validate themselves on creation so malformed data is caught before
it reaches augmentation or training.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from src.errors import DimensionError, ParameterError

N_SEG_CLASSES = 15
N_CHD_CLASSES = 7
N_VIEWS = 4


class View(Enum):
    """Standard fetal cardiac views; value is the on-disk name."""
    FOUR_CHAMBER = "4CH"
    LVOT = "LVOT"
    RVOT = "RVOT"
    THREE_VESSEL = "3VT"

    @property
    def index(self) -> int:
        return VIEW_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "View":
        if not 0 <= index < N_VIEWS:
            raise ParameterError(f"view index must be in [0, {N_VIEWS}), got {index}")
        return VIEW_ORDER[index]

    @classmethod
    def parse(cls, name: str) -> "View":
        try:
            return cls(name)
        except ValueError:
            raise ParameterError(f"unknown view '{name}'; expected one of {[v.value for v in cls]}")


VIEW_ORDER = (View.FOUR_CHAMBER, View.LVOT, View.RVOT, View.THREE_VESSEL)


@dataclass
class Sample:
    """
    One phantom image with its annotations.

    Attributes:
        id: unique sample id
        image: 1 x H x W floats in [0, 1]
        mask: H x W class indices in [0, 14]; None once labels are stripped
        view: standard view
        chd: CHD class in [0, 6]; None once labels are stripped
        labeled: whether training may see mask and chd
    """
    id: str
    image: np.ndarray
    mask: Optional[np.ndarray]
    view: View
    chd: Optional[int]
    labeled: bool

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DimensionError(f"sample {self.id}: image must be 1xHxW, got {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[1:]:
                raise DimensionError(f"sample {self.id}: mask {self.mask.shape} does not match image {self.image.shape}")
            if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= N_SEG_CLASSES):
                raise ParameterError(f"sample {self.id}: mask classes must lie in [0, {N_SEG_CLASSES - 1}]")
        if self.chd is not None and not 0 <= self.chd < N_CHD_CLASSES:
            raise ParameterError(f"sample {self.id}: chd class {self.chd} outside [0, {N_CHD_CLASSES - 1}]")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def strip_labels(self) -> "Sample":
        """Copy with mask and chd removed, as seen by the unlabeled training path."""
        return replace(self, mask=None, chd=None, labeled=False)


@dataclass
class ManifestEntry:
    """Per-sample manifest row."""
    id: str
    split: str
    view: View
    chd: int
    labeled: bool

    def to_dict(self) -> dict:
        return {"id": self.id, "split": self.split, "view": self.view.value,
                "chd": self.chd, "labeled": self.labeled}

    @classmethod
    def from_dict(cls, data: dict) -> "ManifestEntry":
        return cls(id=str(data["id"]), split=str(data["split"]), view=View.parse(data["view"]),
                   chd=int(data["chd"]), labeled=bool(data["labeled"]))


@dataclass
class DatasetManifest:
    """
    Index of an on-disk phantom dataset.

    Attributes:
        root: dataset directory
        seed: generator seed
        entries: one entry per sample, ids unique
    """
    root: Path
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ParameterError("manifest sample ids must be unique")

    @property
    def splits(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.split not in seen:
                seen.append(e.split)
        return seen

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise KeyError(sample_id)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "splits": self.splits, "samples": [e.to_dict() for e in self.entries]}
