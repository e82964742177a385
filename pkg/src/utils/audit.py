"""
Run-directory audit trails: CSV logs and mask-legality counters.
"""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union


class CsvLog:
    """
    CSV file written row by row with a fixed header.

    Floats are formatted with a fixed precision so identical runs produce
    identical bytes.
    """

    def __init__(self, path: Union[str, Path], header: Sequence[str], precision: int = 6):
        self.path = Path(path)
        self.header = list(header)
        self.precision = precision
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(self.header)

    def _format(self, value) -> str:
        if isinstance(value, bool):
            return str(int(value))
        if isinstance(value, float):
            return f"{value:.{self.precision}f}"
        return str(value)

    def append(self, row: dict) -> None:
        missing = [k for k in self.header if k not in row]
        if missing:
            raise KeyError(f"{self.path.name}: row lacks {missing}")
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([self._format(row[k]) for k in self.header])

    def extend(self, rows: Sequence[Sequence]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in rows:
                writer.writerow([self._format(v) for v in row])


@dataclass
class MaskAudit:
    """Counts of pixels checked and found outside the view's allowed classes."""
    pseudo_pixels: int = 0
    pseudo_illegal: int = 0
    prediction_pixels: int = 0
    prediction_illegal: int = 0

    def record_pseudo(self, pixels: int, illegal: int) -> None:
        self.pseudo_pixels += pixels
        self.pseudo_illegal += illegal

    def record_prediction(self, pixels: int, illegal: int) -> None:
        self.prediction_pixels += pixels
        self.prediction_illegal += illegal

    def to_dict(self) -> dict:
        return asdict(self)
