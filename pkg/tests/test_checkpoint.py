import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from openworld_bench.checkpoint import (CheckpointError, load_autoencoder, load_checkpoint, load_classifier,
                                        read_meta, save_checkpoint)
from openworld_bench.models import Autoencoder, build_autoencoder, build_classifier, confidences


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.model = build_classifier('mlp2', (1, 4, 4), ['a', 'b'], seed=2, background_names=['noise'], hidden=6)

    def tearDown(self):
        self.tmp.cleanup()

    def test_classifier_restores_predictions(self):
        path = save_checkpoint(self.dir / 'nested' / 'model', self.model)
        self.assertEqual(path.suffix, '.npz')
        loaded = load_classifier(path)
        self.assertEqual(loaded.label_names, ['a', 'b', 'noise'])
        self.assertEqual(loaded.background_names, ['noise'])
        self.assertEqual(loaded.arch_options, {'hidden': 6})
        images = np.random.default_rng(0).uniform(size=(3, 1, 4, 4))
        np.testing.assert_array_equal(confidences(loaded, images), confidences(self.model, images))

    def test_detector_record_is_kept(self):
        path = save_checkpoint(self.dir / 'model.npz', self.model, detector={'kind': 'baseline', 'threshold': 0.5})
        self.assertEqual(read_meta(path)['detector'], {'kind': 'baseline', 'threshold': 0.5})

    def test_autoencoder_kind(self):
        path = save_checkpoint(self.dir / 'ae.npz', build_autoencoder((1, 4, 4)))
        self.assertIsInstance(load_checkpoint(path), Autoencoder)
        self.assertIsInstance(load_autoencoder(path), Autoencoder)
        with self.assertRaises(CheckpointError):
            load_classifier(path)

    def test_classifier_is_not_an_autoencoder(self):
        path = save_checkpoint(self.dir / 'model.npz', self.model)
        with self.assertRaises(CheckpointError):
            load_autoencoder(path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.dir / 'absent.npz')

    def test_not_a_container(self):
        path = self.dir / 'junk.npz'
        path.write_text('definitely not an archive')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_archive(self):
        path = self.dir / 'foreign.npz'
        np.savez(path, weights=np.zeros(3))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_parameter_shape_mismatch(self):
        path = save_checkpoint(self.dir / 'model.npz', self.model)
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
        arrays['param/fc1.weight'] = np.zeros((2, 2))
        np.savez(path, **arrays)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_unsupported_version(self):
        path = save_checkpoint(self.dir / 'model.npz', self.model)
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
        meta = json.loads(arrays['__meta__'].tobytes().decode('utf-8'))
        meta['version'] = 99
        arrays['__meta__'] = np.frombuffer(json.dumps(meta).encode('utf-8'), dtype=np.uint8)
        np.savez(path, **arrays)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)


if __name__ == '__main__':
    unittest.main()
