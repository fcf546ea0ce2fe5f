import gzip
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from openworld_bench.datasets import (DatasetError, IdxFormatError, LabeledDataset, PgmFormatError,
                                      ShapeSetOverlapError, UnlabeledDataset, gen_gaussian_noise_ood,
                                      gen_paired_shapes, gen_synthetic_shapes, load_idx, load_manifest, load_mnist,
                                      load_pgm, load_pgm_folder, save_pgm_folder, write_idx)


def _pgm_bytes(width, height, maxval, pixels, comment=False):
    header = b"P5\n"
    if comment:
        header += b"# written by a scanner\n"
    header += f"{width} {height}\n{maxval}\n".encode('ascii')
    return header + bytes(pixels)


class TestContainers(unittest.TestCase):

    def test_labels_must_match_images(self):
        with self.assertRaises(DatasetError):
            LabeledDataset(np.zeros((3, 4, 4)), [0, 1], ['a', 'b'])

    def test_labels_must_index_names(self):
        with self.assertRaises(DatasetError):
            LabeledDataset(np.zeros((2, 4, 4)), [0, 2], ['a', 'b'])

    def test_pixels_must_lie_in_unit_range(self):
        with self.assertRaises(DatasetError):
            UnlabeledDataset(np.full((1, 4, 4), 1.5), 'bright')

    def test_hw_images_gain_channel_axis(self):
        data = UnlabeledDataset(np.zeros((2, 5, 6)), 'flat')
        self.assertEqual(data.input_shape, (1, 5, 6))

    def test_split_is_seeded_and_disjoint(self):
        images = np.linspace(0, 1, 10)[:, None, None, None] * np.ones((10, 1, 2, 2))
        data = LabeledDataset(images, np.arange(10) % 2, ['even', 'odd'])
        first, second = data.split(0.7, seed=3)
        self.assertEqual((len(first), len(second)), (7, 3))
        again, _ = data.split(0.7, seed=3)
        np.testing.assert_array_equal(first.images, again.images)
        seen = set(first.images[:, 0, 0, 0]) | set(second.images[:, 0, 0, 0])
        self.assertEqual(len(seen), 10)

    def test_as_unlabeled_drops_labels(self):
        data = LabeledDataset(np.zeros((2, 3, 3)), [0, 1], ['a', 'b'], name='pair')
        ood = data.as_unlabeled()
        self.assertIsInstance(ood, UnlabeledDataset)
        self.assertEqual(ood.source_name, 'pair')
        self.assertFalse(hasattr(ood, 'labels'))


class TestIdx(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_load_scales_bytes(self):
        raw = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
        images = write_idx(self.dir / 'images.idx3', raw)
        labels = write_idx(self.dir / 'labels.idx1', np.array([7], dtype=np.uint8))
        data = load_idx(images, labels)
        self.assertIsInstance(data, LabeledDataset)
        np.testing.assert_allclose(data.images[0, 0], [[0.0, 1.0], [0.2, 0.4]])
        self.assertEqual(data.labels.tolist(), [7])
        self.assertEqual(len(data.label_names), 8)

    def test_without_labels_returns_unlabeled(self):
        images = write_idx(self.dir / 'noise.idx3.gz', np.zeros((3, 2, 2), dtype=np.uint8))
        data = load_idx(images)
        self.assertIsInstance(data, UnlabeledDataset)
        self.assertEqual(data.source_name, 'noise')
        self.assertEqual(len(data), 3)

    def test_bad_magic_reports_observed_bytes(self):
        path = self.dir / 'images'
        path.write_bytes(struct.pack('>I', 0x00000801) + struct.pack('>I', 1) + b'\x00')
        with self.assertRaises(IdxFormatError) as ctx:
            load_idx(path)
        self.assertIn('00 00 08 01', str(ctx.exception))

    def test_truncated_payload(self):
        path = self.dir / 'images'
        path.write_bytes(struct.pack('>IIII', 0x00000803, 2, 3, 3) + bytes(10))
        with self.assertRaises(IdxFormatError):
            load_idx(path)

    def test_truncated_gzip_payload(self):
        path = self.dir / 'images.gz'
        with gzip.open(path, 'wb') as fh:
            fh.write(struct.pack('>IIII', 0x00000803, 2, 3, 3) + bytes(10))
        with self.assertRaises(IdxFormatError):
            load_idx(path)

    def test_oversized_gzip_header_rejected_before_reading(self):
        path = self.dir / 'huge.gz'
        with gzip.open(path, 'wb') as fh:
            fh.write(struct.pack('>IIII', 0x00000803, 2 ** 20, 2 ** 10, 2 ** 10) + bytes(10))
        with self.assertRaises(IdxFormatError) as ctx:
            load_idx(path)
        self.assertIn(str(2 ** 40), str(ctx.exception))

    def test_large_gzip_header_over_short_payload(self):
        path = self.dir / 'large.gz'
        with gzip.open(path, 'wb') as fh:
            fh.write(struct.pack('>IIII', 0x00000803, 1000, 1000, 1000) + bytes(10))
        with self.assertRaises(IdxFormatError) as ctx:
            load_idx(path)
        self.assertIn('got 10', str(ctx.exception))

    def test_mnist_directory_accepts_gzip_names(self):
        write_idx(self.dir / 't10k-images-idx3-ubyte.gz', np.zeros((4, 28, 28), dtype=np.uint8))
        write_idx(self.dir / 't10k-labels-idx1-ubyte.gz', np.arange(4, dtype=np.uint8))
        data = load_mnist(self.dir, 'test')
        self.assertEqual(data.name, 'mnist-test')
        self.assertEqual(data.input_shape, (1, 28, 28))

    def test_missing_mnist_file(self):
        with self.assertRaises(DatasetError):
            load_mnist(self.dir, 'train')


class TestPgm(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_header_comment_and_maxval(self):
        path = self.dir / 'a.pgm'
        path.write_bytes(_pgm_bytes(3, 2, 15, [0, 15, 5, 10, 15, 0], comment=True))
        image = load_pgm(path)
        self.assertEqual(image.shape, (2, 3))
        np.testing.assert_allclose(image, [[0.0, 1.0, 1 / 3], [2 / 3, 1.0, 0.0]])

    def test_short_payload(self):
        path = self.dir / 'short.pgm'
        path.write_bytes(_pgm_bytes(4, 4, 255, [0] * 10))
        with self.assertRaises(PgmFormatError):
            load_pgm(path)

    def test_ascii_pgm_rejected(self):
        path = self.dir / 'ascii.pgm'
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with self.assertRaises(PgmFormatError):
            load_pgm(path)

    def test_sixteen_bit_maxval_rejected(self):
        path = self.dir / 'deep.pgm'
        path.write_bytes(_pgm_bytes(1, 1, 65535, [0, 0]))
        with self.assertRaises(PgmFormatError):
            load_pgm(path)

    def test_folder_resizes_to_target_shape(self):
        for name in ('b.pgm', 'a.pgm'):
            (self.dir / name).write_bytes(_pgm_bytes(2, 2, 255, [0, 255, 255, 0]))
        (self.dir / 'notes.txt').write_text('ignored')
        data = load_pgm_folder(self.dir, shape=(1, 4, 4), source_name='tiles')
        self.assertEqual(len(data), 2)
        self.assertEqual(data.input_shape, (1, 4, 4))
        self.assertEqual(data.source_name, 'tiles')

    def test_empty_folder(self):
        with self.assertRaises(DatasetError):
            load_pgm_folder(self.dir)

    def test_saved_folder_reloads_within_quantisation(self):
        source = gen_gaussian_noise_ood(3, (1, 6, 6), seed=5)
        paths = save_pgm_folder(self.dir / 'out', source, prefix='noise')
        self.assertEqual([p.name for p in paths], ['noise_0.pgm', 'noise_1.pgm', 'noise_2.pgm'])
        reloaded = load_pgm_folder(self.dir / 'out')
        np.testing.assert_allclose(reloaded.images, source.images, atol=0.5 / 255 + 1e-12)


class TestManifest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        (self.dir / 'img').mkdir()
        (self.dir / 'img' / 'x.pgm').write_bytes(_pgm_bytes(2, 2, 255, [0, 0, 0, 255]))
        (self.dir / 'img' / 'y.pgm').write_bytes(_pgm_bytes(2, 2, 255, [255, 0, 0, 0]))

    def tearDown(self):
        self.tmp.cleanup()

    def test_labelled_manifest(self):
        path = self.dir / 'set.txt'
        path.write_text("# two images\nrole: in\nname: tiny\nimg/x.pgm dog\nimg/y.pgm cat\n")
        data = load_manifest(path)
        self.assertIsInstance(data, LabeledDataset)
        self.assertEqual(data.name, 'tiny')
        self.assertEqual(data.label_names, ['cat', 'dog'])
        self.assertEqual(data.labels.tolist(), [1, 0])

    def test_out_manifest_is_unlabeled(self):
        path = self.dir / 'ood.txt'
        path.write_text("role: out\nimg/x.pgm\nimg/y.pgm\n")
        data = load_manifest(path)
        self.assertIsInstance(data, UnlabeledDataset)
        self.assertEqual(data.source_name, 'ood')

    def test_missing_role(self):
        path = self.dir / 'bad.txt'
        path.write_text("img/x.pgm dog\n")
        with self.assertRaises(DatasetError):
            load_manifest(path)

    def test_in_entries_need_labels(self):
        path = self.dir / 'bad.txt'
        path.write_text("role: in\nimg/x.pgm dog\nimg/y.pgm\n")
        with self.assertRaises(DatasetError):
            load_manifest(path)


class TestGenerators(unittest.TestCase):

    def test_gaussian_is_seeded_and_centred(self):
        first = gen_gaussian_noise_ood(200, (1, 8, 8), seed=1)
        again = gen_gaussian_noise_ood(200, (1, 8, 8), seed=1)
        other = gen_gaussian_noise_ood(200, (1, 8, 8), seed=2)
        np.testing.assert_array_equal(first.images, again.images)
        self.assertFalse(np.array_equal(first.images, other.images))
        self.assertAlmostEqual(float(first.images.mean()), 127.0 / 255.0, delta=0.01)
        self.assertGreaterEqual(first.images.min(), 0.0)
        self.assertLessEqual(first.images.max(), 1.0)

    def test_gaussian_rejects_bad_arguments(self):
        with self.assertRaises(DatasetError):
            gen_gaussian_noise_ood(10, stddev=0.0)
        with self.assertRaises(DatasetError):
            gen_gaussian_noise_ood(0)

    def test_shapes_are_balanced(self):
        data = gen_synthetic_shapes(9, (1, 16, 16), ['bars', 'rings', 'dots'], seed=4)
        self.assertEqual(np.bincount(data.labels).tolist(), [3, 3, 3])
        self.assertEqual(data.label_names, ['bars', 'rings', 'dots'])
        self.assertEqual(data.name, 'bars+rings+dots')
        self.assertGreater(data.images.max(), 0.0)

    def test_shapes_reject_unknown_or_repeated_classes(self):
        with self.assertRaises(DatasetError):
            gen_synthetic_shapes(4, class_set=['bars', 'stars'])
        with self.assertRaises(DatasetError):
            gen_synthetic_shapes(4, class_set=['bars', 'bars'])

    def test_paired_sets_must_be_disjoint(self):
        with self.assertRaises(ShapeSetOverlapError):
            gen_paired_shapes(4, 4, ['bars', 'rings'], ['rings'])
        in_data, out_data = gen_paired_shapes(4, 2, ['bars'], ['rings'], shape=(1, 8, 8))
        self.assertEqual(len(in_data), 4)
        self.assertEqual(out_data.source_name, 'shapes:rings')


if __name__ == '__main__':
    unittest.main()
