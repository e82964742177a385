"""
Unit tests for run-directory logs and random streams.

Run with: pytest tests/test_audit.py -v
"""

import csv
import sys
from pathlib import Path

import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils.audit import CsvLog, MaskAudit
from src.utils.seeding import stream


class TestCsvLog:
    """Tests for CsvLog."""

    def test_header_and_formatting(self, tmp_path):
        """Test fixed float precision and booleans as 0/1."""
        log = CsvLog(tmp_path / "logs" / "m.csv", ["epoch", "loss", "ok"])
        log.append({"epoch": 0, "loss": 0.5, "ok": True, "extra": "ignored"})
        log.extend([[1, 0.25, False]])
        with open(log.path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows == [["epoch", "loss", "ok"], ["0", "0.500000", "1"], ["1", "0.250000", "0"]]

    def test_missing_column(self, tmp_path):
        """Test that a row lacking a header column raises."""
        log = CsvLog(tmp_path / "m.csv", ["epoch", "loss"])
        with pytest.raises(KeyError):
            log.append({"epoch": 1})

    def test_reopen_truncates(self, tmp_path):
        """Test that opening a log starts a fresh file."""
        CsvLog(tmp_path / "m.csv", ["a"]).append({"a": 1})
        log = CsvLog(tmp_path / "m.csv", ["a"])
        assert log.path.read_text().splitlines() == ["a"]


class TestMaskAudit:
    """Tests for MaskAudit."""

    def test_counters(self):
        """Test that pseudo-label and prediction counts accumulate separately."""
        audit = MaskAudit()
        audit.record_pseudo(100, 0)
        audit.record_pseudo(50, 2)
        audit.record_prediction(10, 1)
        assert audit.to_dict() == {
            "pseudo_pixels": 150, "pseudo_illegal": 2,
            "prediction_pixels": 10, "prediction_illegal": 1,
        }


class TestStream:
    """Tests for keyed random streams."""

    def test_same_key_same_draws(self):
        """Test that a key reproduces its draws."""
        assert (stream(3, "phase1", 0, "u-1").random(4) == stream(3, "phase1", 0, "u-1").random(4)).all()

    def test_keys_are_independent(self):
        """Test that any differing key part changes the draws."""
        base = stream(3, "phase1", 0, "u-1").random(4)
        assert (stream(4, "phase1", 0, "u-1").random(4) != base).any()
        assert (stream(3, "phase1", 1, "u-1").random(4) != base).any()
        assert (stream(3, "phase1", 0, "u-2").random(4) != base).any()

    def test_negative_key(self):
        """Test that negative integer keys are refused."""
        with pytest.raises(ValueError):
            stream(0, -1)
