"""Tests for the on-disk dataset format."""

import numpy as np
import pytest

from h2dilr.core.errors import DatasetError
from h2dilr.services.dataset_io import read_dataset, read_datasets, subject_dir, write_datasets


class TestDatasetFiles:
    """Tests for writing and reading subject directories."""

    def test_layout(self, tiny_datasets, tmp_path):
        """meta, signals and labels per subject."""
        paths = write_datasets(tiny_datasets, tmp_path, seed=0)
        assert [p.name for p in paths] == ["subject_0", "subject_1"]
        meta = (paths[0] / "meta").read_text().splitlines()
        assert meta == ["subject=0", "channels=4", "segment_length=64", "samples=20", "seed=0"]
        assert (paths[1] / "signals").stat().st_size == 20 * 64 * 6 * 4
        labels = (paths[0] / "labels").read_text().splitlines()
        assert labels[0] == "trial,tone"
        assert len(labels) == 21

    def test_read_back_at_float32(self, tiny_datasets, tmp_path):
        """Signals come back at 32-bit precision with labels intact."""
        write_datasets(tiny_datasets, tmp_path, seed=0)
        loaded = read_datasets(tmp_path)
        for original, restored in zip(tiny_datasets, loaded):
            assert restored.subject == original.subject
            assert restored.channels == original.channels
            np.testing.assert_array_equal(restored.signals(), original.signals().astype(np.float32))
            np.testing.assert_array_equal(restored.tones(), original.tones())

    def test_rewrite_identical(self, tiny_datasets, tmp_path):
        """Writing the same datasets twice gives identical bytes."""
        write_datasets(tiny_datasets, tmp_path / "a", seed=0)
        write_datasets(tiny_datasets, tmp_path / "b", seed=0)
        for name in ("meta", "signals", "labels"):
            a = (subject_dir(tmp_path / "a", 1) / name).read_bytes()
            assert a == (subject_dir(tmp_path / "b", 1) / name).read_bytes()

    def test_truncated_signals(self, tiny_datasets, tmp_path):
        """A short blob is reported against the meta counts."""
        path = write_datasets(tiny_datasets, tmp_path, seed=0)[0]
        blob = (path / "signals").read_bytes()
        (path / "signals").write_bytes(blob[:-4])
        with pytest.raises(DatasetError, match="signals"):
            read_dataset(path)

    def test_missing_root(self, tmp_path):
        """No subject directories is an error naming the path."""
        with pytest.raises(DatasetError, match=str(tmp_path)):
            read_datasets(tmp_path / "absent")

    def test_ignores_unrelated_directories(self, tiny_datasets, tmp_path):
        """Only subject_<id> directories are read."""
        write_datasets(tiny_datasets, tmp_path, seed=0)
        (tmp_path / "subject_backup").mkdir()
        assert [d.subject for d in read_datasets(tmp_path)] == [0, 1]
