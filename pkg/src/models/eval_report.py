"""
Evaluation report data model.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.errors import ParameterError


@dataclass
class EvalReport:
    """
    Segmentation and classification metrics for one split, as percentages.

    Attributes:
        per_class_dice: class index -> Dice (classes never scored are absent)
        dice_mean: mean Dice over scored classes
        per_class_nsd: class index -> NSD
        nsd_mean: mean NSD over scored classes
        macro_f1: macro F1 over CHD classes
        overall: 0.5 * F1 + 0.25 * Dice + 0.25 * NSD
        confusion: 7 x 7 counts, rows = ground truth
        illegal_pixels: predicted pixels outside the predicted view's allowed set
    """
    per_class_dice: dict = field(default_factory=dict)
    dice_mean: float = 0.0
    per_class_nsd: dict = field(default_factory=dict)
    nsd_mean: float = 0.0
    macro_f1: float = 0.0
    overall: float = 0.0
    confusion: list = field(default_factory=list)
    view_accuracy: Optional[float] = None
    illegal_pixels: int = 0
    n_images: int = 0

    def __post_init__(self):
        for name in ("dice_mean", "nsd_mean", "macro_f1", "overall"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0 + 1e-9:
                raise ParameterError(f"{name}={value} is not a percentage")

    def summary(self) -> dict:
        """Scalar fields only, for metrics rows and logs."""
        return {
            "dice_mean": self.dice_mean,
            "nsd_mean": self.nsd_mean,
            "macro_f1": self.macro_f1,
            "overall": self.overall,
        }

    def to_dict(self) -> dict:
        data = asdict(self)
        data["per_class_dice"] = {str(k): v for k, v in self.per_class_dice.items()}
        data["per_class_nsd"] = {str(k): v for k, v in self.per_class_nsd.items()}
        data["confusion"] = np.asarray(self.confusion, dtype=np.int64).tolist()
        return data

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def write_csv(self, path: Union[str, Path]) -> None:
        """Long format: metric, class, value."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "class", "value"])
            for cls, value in sorted(self.per_class_dice.items()):
                writer.writerow(["dice", cls, f"{value:.6f}"])
            for cls, value in sorted(self.per_class_nsd.items()):
                writer.writerow(["nsd", cls, f"{value:.6f}"])
            for name, value in self.summary().items():
                writer.writerow([name, "", f"{value:.6f}"])
