"""
Unit tests for phantom generation and the on-disk dataset format.

Run with: pytest tests/test_phantom_data.py -v
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.anatomy_mask import allowed_categories
from src.errors import DataError, ParameterError, ParseError
from src.models.sample import Sample, View
from src.phantom_data import (
    BACKGROUND_LEVEL,
    SPLIT_LABELED,
    SPLIT_UNLABELED,
    SPLITS,
    PhantomSpec,
    SplitCounts,
    generate_dataset,
    generate_phantom,
    load_sample,
    load_split,
    plan_dataset,
    read_dataset,
    structure_intensity,
)
from src.utils.pgm import read_pgm, write_pgm

CLEAN = PhantomSpec(size=32, noise_var=0.0, shadow_prob=0.0)


class TestGeneratePhantom:
    """Tests for single-phantom rendering."""

    @pytest.mark.parametrize("view", list(View))
    def test_mask_respects_view(self, view):
        """Test that mask classes stay inside the view's category set."""
        for seed in range(5):
            sample = generate_phantom(seed, view, 0, CLEAN)
            assert set(np.unique(sample.mask)) <= set(allowed_categories(view))

    def test_three_vessel_classes(self):
        """Test the 3VT class set explicitly."""
        sample = generate_phantom(4, View.THREE_VESSEL, 2, CLEAN)
        assert set(np.unique(sample.mask)) <= {0, 9, 12, 13, 14}

    def test_structure_count(self):
        """Test that 2 to 5 foreground structures are drawn."""
        for seed in range(10):
            sample = generate_phantom(seed, View.FOUR_CHAMBER, 0, CLEAN)
            n = len(set(np.unique(sample.mask)) - {0})
            assert 1 <= n <= 5

    def test_deterministic(self):
        """Test that the same (seed, view, chd) is bit-identical."""
        a = generate_phantom(7, View.RVOT, 3)
        b = generate_phantom(7, View.RVOT, 3)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_clean_image_is_piecewise_constant(self):
        """Test that without noise or shadow each structure has one intensity."""
        sample = generate_phantom(1, View.FOUR_CHAMBER, 0, CLEAN)
        image = sample.image[0]
        assert np.allclose(image[sample.mask == 0], BACKGROUND_LEVEL)
        for cls in set(np.unique(sample.mask)) - {0}:
            assert np.allclose(image[sample.mask == cls], structure_intensity(int(cls)))

    def test_chd_changes_geometry(self):
        """Test that the CHD class perturbs the rendered structures."""
        normal = generate_phantom(5, View.FOUR_CHAMBER, 0, CLEAN)
        abnormal = generate_phantom(5, View.FOUR_CHAMBER, 1, CLEAN)
        assert normal.chd == 0 and abnormal.chd == 1
        assert normal.mask.shape == abnormal.mask.shape

    def test_image_range(self):
        """Test that noisy images stay in [0, 1]."""
        sample = generate_phantom(3, View.LVOT, 4, PhantomSpec(size=32, noise_var=0.2, shadow_prob=1.0))
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_bad_chd(self):
        """Test that a CHD class outside [0, 6] raises."""
        with pytest.raises(ParameterError):
            generate_phantom(0, View.LVOT, 7)

    def test_bad_size(self):
        """Test that sizes not divisible by 16 are rejected."""
        with pytest.raises(ParameterError):
            PhantomSpec(size=40)


class TestSplitCounts:
    """Tests for split sizing."""

    def test_zero_split_rejected(self):
        """Test that an empty split is refused."""
        with pytest.raises(ParameterError):
            SplitCounts(labeled=0, unlabeled=1, val=1, test=1)

    def test_default_labeled_fraction(self):
        """Test 200 labeled of 600 training samples by default."""
        counts = SplitCounts()
        assert counts.labeled == 200
        assert counts.labeled + counts.unlabeled == 600

    def test_plan_is_deterministic(self, tmp_path):
        """Test that planning twice yields the same manifest and seeds."""
        counts = SplitCounts(3, 3, 2, 2)
        m1, s1 = plan_dataset(tmp_path, counts, 9)
        m2, s2 = plan_dataset(tmp_path, counts, 9)
        assert m1.to_dict() == m2.to_dict()
        assert s1 == s2


class TestDatasetIO:
    """Tests for writing and reading datasets."""

    @pytest.fixture
    def dataset(self, tmp_path):
        """Generate a tiny dataset."""
        return generate_dataset(tmp_path / "data", SplitCounts(1, 1, 1, 1), seed=3,
                                spec=PhantomSpec(size=16))

    def test_four_samples(self, dataset):
        """Test that counts {1,1,1,1} produce four samples, one per split."""
        assert len(dataset.entries) == 4
        assert dataset.splits == list(SPLITS)

    def test_manifest_round_trip(self, dataset):
        """Test that the manifest reads back equal."""
        again = read_dataset(dataset.root)
        assert again.to_dict() == dataset.to_dict()

    def test_unlabeled_flag(self, dataset):
        """Test that only the unlabeled split is marked unlabeled."""
        for entry in dataset.entries:
            assert entry.labeled == (entry.split != SPLIT_UNLABELED)

    def test_masks_bit_identical(self, dataset):
        """Test that re-rendering matches the stored mask exactly."""
        _, seeds = plan_dataset(dataset.root, SplitCounts(1, 1, 1, 1), 3)
        entry = dataset.entries[0]
        fresh = generate_phantom(seeds[entry.id], entry.view, entry.chd, PhantomSpec(size=16), entry.id)
        stored = load_sample(dataset, entry.id)
        assert np.array_equal(stored.mask, fresh.mask)
        assert np.allclose(stored.image, fresh.image, atol=1.0 / 65535)

    def test_load_split(self, dataset):
        """Test loading a split in manifest order."""
        samples = load_split(dataset, SPLIT_LABELED)
        assert [s.id for s in samples] == dataset.ids(SPLIT_LABELED)
        assert all(isinstance(s, Sample) for s in samples)

    def test_same_seed_same_bytes(self, tmp_path):
        """Test that parallel generation reproduces serial output."""
        a = generate_dataset(tmp_path / "a", SplitCounts(2, 2, 1, 1), seed=5, spec=PhantomSpec(size=16))
        b = generate_dataset(tmp_path / "b", SplitCounts(2, 2, 1, 1), seed=5, spec=PhantomSpec(size=16), jobs=3)
        for sample_id in a.ids():
            split = a.entry(sample_id).split
            left = (a.root / split / f"{sample_id}.img.pgm").read_bytes()
            right = (b.root / split / f"{sample_id}.img.pgm").read_bytes()
            assert left == right

    def test_mask_class_fifteen_rejected(self, dataset):
        """Test that a stored mask value above 14 is rejected on read."""
        entry = dataset.entries[0]
        mask_path = dataset.root / entry.split / f"{entry.id}.mask.pgm"
        mask, _ = read_pgm(mask_path)
        mask[0, 0] = 15
        write_pgm(mask_path, mask, 255)
        with pytest.raises(ParseError) as exc_info:
            load_sample(dataset, entry.id)
        assert exc_info.value.path == str(mask_path)

    def test_missing_manifest(self, tmp_path):
        """Test that a directory without manifest.json is a data error."""
        with pytest.raises(DataError):
            read_dataset(tmp_path)

    def test_malformed_manifest(self, dataset):
        """Test that broken JSON reports a parse error with an offset."""
        (dataset.root / "manifest.json").write_text('{"seed": 1,', encoding="utf-8")
        with pytest.raises(ParseError) as exc_info:
            read_dataset(dataset.root)
        assert exc_info.value.offset >= 0

    def test_missing_sample_file(self, dataset):
        """Test that a deleted image file is detected."""
        entry = dataset.entries[1]
        (dataset.root / entry.split / f"{entry.id}.img.pgm").unlink()
        with pytest.raises(DataError):
            read_dataset(dataset.root)

    def test_sidecar_content(self, dataset):
        """Test the per-sample JSON sidecar fields."""
        entry = dataset.entries[0]
        meta = json.loads((dataset.root / entry.split / f"{entry.id}.json").read_text())
        assert meta == {"view": entry.view.value, "chd": entry.chd, "labeled": entry.labeled}
