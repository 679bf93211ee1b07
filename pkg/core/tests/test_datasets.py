import gzip
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.datasets import (
    Dataset, assign_splits, fine_classes, load_idx, synth_dataset, write_idx,
)
from core.exceptions import DatasetError


class IdxTestCase(SimpleTestCase):
    """Leitura e escrita de pares IDX (imagens u8 e rótulos u8)."""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _write(self, name, data: bytes) -> Path:
        path = self.tmp / name
        path.write_bytes(data)
        return path

    def test_hand_built_files(self):
        pixels = bytes([0, 255, 128, 64] * 2)
        images = self._write('img.idx', struct.pack('>IIII', 0x803, 2, 2, 2) + pixels)
        labels = self._write('lbl.idx', struct.pack('>II', 0x801, 2) + bytes([1, 0]))
        dataset = load_idx(images, labels)
        self.assertEqual(dataset.images.shape, (2, 1, 2, 2))
        self.assertEqual(dataset.class_count, 2)
        self.assertEqual(dataset.labels.tolist(), [1, 0])
        self.assertAlmostEqual(float(dataset.images[0, 0, 0, 1]), 1.0)
        self.assertAlmostEqual(float(dataset.images[0, 0, 1, 0]), 128 / 255, places=6)

    def test_gzip_files(self):
        images = self._write('img.idx.gz', gzip.compress(struct.pack('>IIII', 0x803, 1, 1, 1) + b'\x10'))
        labels = self._write('lbl.idx.gz', gzip.compress(struct.pack('>II', 0x801, 1) + b'\x03'))
        dataset = load_idx(images, labels, class_count=5)
        self.assertEqual(dataset.class_count, 5)
        self.assertEqual(dataset.labels.tolist(), [3])

    def test_write_then_load(self):
        original = synth_dataset(3, 4, image_size=8, seed=2)
        write_idx(original, self.tmp / 'a-images.idx', self.tmp / 'a-labels.idx')
        loaded = load_idx(self.tmp / 'a-images.idx', self.tmp / 'a-labels.idx')
        np.testing.assert_array_equal(loaded.labels, original.labels)
        np.testing.assert_allclose(loaded.images, original.images, atol=0.5 / 255 + 1e-7)

    def test_count_mismatch(self):
        images = self._write('img.idx', struct.pack('>IIII', 0x803, 2, 1, 1) + b'\x00\x00')
        labels = self._write('lbl.idx', struct.pack('>II', 0x801, 3) + b'\x00\x00\x00')
        with self.assertRaisesRegex(DatasetError, "Contagens"):
            load_idx(images, labels)

    def test_bad_magic_and_truncation(self):
        labels = self._write('lbl.idx', struct.pack('>II', 0x801, 1) + b'\x00')
        with self.assertRaisesRegex(DatasetError, "magic"):
            load_idx(self._write('bad.idx', struct.pack('>IIII', 0x801, 1, 1, 1) + b'\x00'), labels)
        with self.assertRaisesRegex(DatasetError, "truncado"):
            load_idx(self._write('short.idx', struct.pack('>IIII', 0x803, 1, 4, 4) + b'\x00'), labels)

    def test_zero_images(self):
        images = self._write('img.idx', struct.pack('>IIII', 0x803, 0, 4, 4))
        labels = self._write('lbl.idx', struct.pack('>II', 0x801, 0))
        self.assertEqual(len(load_idx(images, labels, class_count=2)), 0)

    def test_missing_file(self):
        with self.assertRaises(DatasetError):
            load_idx(self.tmp / 'nope.idx', self.tmp / 'nope-labels.idx')


class SynthDatasetTestCase(SimpleTestCase):

    def test_same_seed_same_images(self):
        first, second = synth_dataset(4, 5, 16, 'mixed', seed=9), synth_dataset(4, 5, 16, 'mixed', seed=9)
        np.testing.assert_array_equal(first.images, second.images)
        self.assertFalse(np.array_equal(first.images, synth_dataset(4, 5, 16, 'mixed', seed=10).images))

    def test_shape_range_and_balance(self):
        dataset = synth_dataset(6, 7, 12, 'coarse', seed=0)
        self.assertEqual(dataset.images.shape, (42, 1, 12, 12))
        self.assertEqual(dataset.class_counts.tolist(), [7] * 6)
        self.assertGreaterEqual(dataset.images.min(), 0.0)
        self.assertLessEqual(dataset.images.max(), 1.0)

    def test_invalid_arguments(self):
        with self.assertRaises(DatasetError):
            synth_dataset(4, 0)
        with self.assertRaises(DatasetError):
            synth_dataset(4, 2, structure_profile='wavy')
        with self.assertRaises(DatasetError):
            synth_dataset(4, 2, image_size=4)

    def test_fine_classes(self):
        self.assertEqual(fine_classes(8, 'mixed'), [0, 1, 2, 3])
        self.assertEqual(fine_classes(3, 'coarse'), [])
        self.assertEqual(fine_classes(3, 'fine'), [0, 1, 2])


class SplitAssignmentTestCase(SimpleTestCase):

    def test_splits_are_disjoint_and_stratified(self):
        dataset = assign_splits(synth_dataset(4, 20, 8, seed=1), seed=3)
        parts = {tag: dataset.subset(tag) for tag in ('train', 'val', 'test')}
        self.assertEqual(sum(len(part) for part in parts.values()), len(dataset))
        self.assertEqual(parts['train'].class_counts.tolist(), [14] * 4)
        self.assertEqual(parts['val'].class_counts.tolist(), [3] * 4)
        self.assertEqual(parts['test'].class_counts.tolist(), [3] * 4)

    def test_same_seed_same_partition(self):
        base = synth_dataset(3, 10, 8, seed=0)
        np.testing.assert_array_equal(assign_splits(base, seed=5).tags, assign_splits(base, seed=5).tags)

    def test_invalid_fractions(self):
        with self.assertRaises(DatasetError):
            assign_splits(synth_dataset(2, 4, 8), fractions=(0.5, 0.5, 0.5))

    def test_subset_without_tags(self):
        with self.assertRaises(DatasetError):
            synth_dataset(2, 2, 8).subset('train')

    def test_restrict_keeps_labels(self):
        dataset = synth_dataset(4, 3, 8).restrict([2, 0])
        self.assertEqual(sorted(set(dataset.labels.tolist())), [0, 2])
        self.assertEqual(dataset.class_count, 4)

    def test_dataset_validation(self):
        with self.assertRaises(DatasetError):
            Dataset(np.zeros((2, 1, 4, 4)), np.array([0]), 2)
        with self.assertRaises(DatasetError):
            Dataset(np.zeros((1, 1, 4, 4)), np.array([5]), 2)
