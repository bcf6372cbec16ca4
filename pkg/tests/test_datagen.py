"""
Tests for the synthetic tasks and the dataset file format.
"""

import numpy as np
import pytest

from utils.datagen import (INFORMATIVE_SHIFT, XI_POINTS, generate_hetero, generate_xi,
                           read_dataset, write_dataset, xi_template)
from utils.errors import DatasetIntegrityError, DatasetParseError, DomainError


def sorted_rows(points):
    return points[np.lexsort(points.T[::-1])]


class TestXiTask:
    def test_templates(self):
        x_char, i_char = xi_template(1), xi_template(0)
        assert x_char.shape == i_char.shape == (XI_POINTS, 3)
        np.testing.assert_array_equal(i_char[:, 0], 0.0)
        np.testing.assert_allclose(i_char[[0, -1], 1], [-1.0, 1.0])
        np.testing.assert_array_equal(x_char[:, 2], 0.0)

    def test_x_is_mirror_symmetric(self):
        x_char = xi_template(1)
        mirrored = x_char * np.array([-1.0, 1.0, 1.0])
        np.testing.assert_allclose(sorted_rows(mirrored), sorted_rows(x_char), atol=1e-12)

    def test_no_jitter_reproduces_templates(self):
        dataset = generate_xi(6, seed=1, jitter=0.0)
        for example in dataset.examples:
            np.testing.assert_array_equal(example.input.points, xi_template(example.label))

    @pytest.mark.parametrize("n", range(2, 12))
    def test_balance(self, n):
        dataset = generate_xi(n, seed=n)
        assert dataset.manifest.class_balance == [n // 2, (n + 1) // 2]
        assert int(dataset.labels.sum()) == (n + 1) // 2

    def test_deterministic(self):
        a, b = generate_xi(10, seed=4), generate_xi(10, seed=4)
        assert a.checksum() == b.checksum()
        assert generate_xi(10, seed=5).checksum() != a.checksum()

    def test_jitter_stays_in_plane(self):
        dataset = generate_xi(8, seed=2, jitter=0.1)
        np.testing.assert_array_equal(dataset.points[:, :, 2], 0.0)
        assert dataset.manifest.D == 0

    @pytest.mark.parametrize("n, jitter", [(1, 0.05), (4, -0.1)])
    def test_invalid(self, n, jitter):
        with pytest.raises(DomainError):
            generate_xi(n, seed=0, jitter=jitter)


class TestHeteroTask:
    def test_shapes_and_flags(self):
        dataset = generate_hetero(12, k=8, d=6, seed=3)
        assert dataset.points.shape == (12, 8, 3)
        assert dataset.tabular.shape == (12, 6)
        assert dataset.manifest.informative == [True, True, True, False, False, False]
        assert dataset.manifest.column_names == [f"x{i}" for i in range(6)]

    def test_no_informative_columns(self):
        dataset = generate_hetero(6, k=4, d=3, seed=0, n_informative=0)
        assert not any(dataset.manifest.informative)

    def test_planted_shift(self):
        dataset = generate_hetero(400, k=4, d=2, seed=5, n_informative=1)
        labels = dataset.labels
        gap = dataset.tabular[labels == 1, 0].mean() - dataset.tabular[labels == 0, 0].mean()
        assert gap == pytest.approx(2 * INFORMATIVE_SHIFT, abs=0.3)

    def test_sphere_versus_ellipsoid(self):
        dataset = generate_hetero(20, k=64, d=1, seed=6)
        spread = np.abs(dataset.points[:, :, 2]).max(axis=1)
        assert np.all(spread[dataset.labels == 1] < 0.6)
        assert np.all(spread[dataset.labels == 0] > 0.6)

    def test_reproducible(self):
        assert generate_hetero(8, 5, 2, seed=9).checksum() == generate_hetero(8, 5, 2, seed=9).checksum()

    def test_invalid(self):
        with pytest.raises(DomainError):
            generate_hetero(10, k=3, d=2, seed=0)
        with pytest.raises(DomainError):
            generate_hetero(10, k=4, d=2, seed=0, n_informative=3)


class TestDatasetFiles:
    def test_write_and_read(self, tmp_path):
        dataset = generate_hetero(10, k=5, d=3, seed=1)
        path = tmp_path / "data.jsonl"
        write_dataset(str(path), dataset)
        loaded = read_dataset(str(path))
        assert loaded.checksum() == dataset.checksum()
        assert loaded.manifest.column_names == dataset.manifest.column_names

    def test_rewrite_is_byte_identical(self, tmp_path):
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(str(first), generate_xi(7, seed=3))
        write_dataset(str(second), generate_xi(7, seed=3))
        assert first.read_bytes() == second.read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(str(path), generate_xi(4, seed=0))
        text = path.read_text()
        path.write_text(text[:-40])
        with pytest.raises(DatasetIntegrityError):
            read_dataset(str(path))

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(str(path), generate_xi(4, seed=0))
        lines = path.read_text().split("\n")
        lines[2] = "{broken"
        path.write_text("\n".join(lines))
        with pytest.raises(DatasetParseError) as info:
            read_dataset(str(path))
        assert info.value.line == 3

    def test_missing_record(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(str(path), generate_xi(4, seed=0))
        lines = path.read_text().split("\n")
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(DatasetIntegrityError):
            read_dataset(str(path))

    def test_empty_dataset(self, tmp_path):
        dataset = generate_xi(2, seed=0)
        dataset.examples.clear()
        with pytest.raises(DatasetIntegrityError):
            write_dataset(str(tmp_path / "empty.jsonl"), dataset)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(str(tmp_path / "nope.jsonl"))
