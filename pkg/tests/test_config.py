import copy
import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import yaml

from openworld_bench.config import (ConfigError, Epsilon, ExperimentSection, config_from_dict, default_output_dir,
                                    default_workers, dump_config, load_config, resolve_path)

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'

BASE = {
    'experiment': {'name': 'unit', 'workers': 1},
    'model': {'train': {'arch': 'linear', 'epochs': 1}},
    'in_data': {'kind': 'shapes', 'classes': ['bars', 'crosses'], 'count': 20, 'shape': [1, 8, 8]},
    'ood_data': [{'name': 'gaussian', 'kind': 'gaussian', 'count': 10, 'shape': [1, 8, 8]}],
    'detectors': [{'name': 'squeeze', 'kind': 'feature-squeezing'}],
}


def with_changes(**sections):
    data = copy.deepcopy(BASE)
    data.update(sections)
    return data


class TestEpsilon(unittest.TestCase):

    def test_byte_scale(self):
        eps = Epsilon(value=16, scale='byte')
        self.assertAlmostEqual(eps.unit_value, 16 / 255)
        self.assertEqual(eps.label, '16/255')

    def test_unit_scale(self):
        eps = Epsilon(value=0.3, scale='unit')
        self.assertEqual(eps.unit_value, 0.3)
        self.assertEqual(eps.label, '0.3')


class TestShippedConfigs(unittest.TestCase):

    def test_toy_config(self):
        cfg = load_config(CONFIG_DIR / 'toy.yaml')
        self.assertEqual(cfg.experiment.name, 'toy')
        self.assertEqual(cfg.in_data.shape, (1, 16, 16))
        self.assertEqual([a.kind for a in cfg.attacks], ['pgd', 'pgd', 'bpda', 'magnet-adaptive', 'eot', 'blackbox'])
        pgd = cfg.attacks[0]
        self.assertEqual([pgd.label(eps) for eps in pgd.epsilon], ['pgd@0.3', 'pgd@16/255'])
        attack_cfg = pgd.attack_config(pgd.epsilon[1], seed=3)
        self.assertAlmostEqual(attack_cfg.constraint.epsilon, 16 / 255)
        self.assertEqual(attack_cfg.step_rule, 'sign')
        self.assertEqual(cfg.attacks[3].lambda_recon, [0.1, 1.0, 10.0])
        squeeze = next(d for d in cfg.detectors if d.name == 'squeeze')
        self.assertEqual(squeeze.polarity, 'adversarial')
        self.assertEqual(squeeze.squeezer_config().bit_depth, 1)

    def test_overrides(self):
        cfg = load_config(CONFIG_DIR / 'toy.yaml', seed=7, output_dir='/tmp/bench-out')
        self.assertEqual(cfg.experiment.seed, 7)
        self.assertEqual(cfg.experiment.output_path, Path('/tmp/bench-out'))

    def test_dump_reloads(self):
        cfg = load_config(CONFIG_DIR / 'toy.yaml')
        self.assertEqual(config_from_dict(yaml.safe_load(dump_config(cfg))), cfg)


class TestValidation(unittest.TestCase):

    def assertConfigError(self, data, fragment):
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict(data)
        self.assertIn(fragment, str(ctx.exception))

    def test_base_is_valid(self):
        cfg = config_from_dict(copy.deepcopy(BASE))
        self.assertEqual(cfg.model.label, 'linear')
        self.assertEqual(cfg.model.train.train_config(seed=4).seed, 4)

    def test_bpda_needs_l2(self):
        attack = {'name': 'b', 'kind': 'bpda', 'epsilon': {'value': 1.0, 'scale': 'unit'}, 'detector': 'squeeze'}
        self.assertConfigError(with_changes(attacks=[attack]), 'l2')

    def test_detector_reference(self):
        attack = {'name': 'm', 'kind': 'magnet-adaptive', 'epsilon': {'value': 0.3, 'scale': 'unit'},
                  'detector': 'squeeze'}
        self.assertConfigError(with_changes(attacks=[attack]), 'magnet detector')

    def test_duplicate_names(self):
        detectors = [{'name': 'base', 'kind': 'baseline'}, {'name': 'base', 'kind': 'odin'}]
        self.assertConfigError(with_changes(detectors=detectors), 'duplicate')

    def test_unknown_sources(self):
        attack = {'name': 'p', 'kind': 'pgd', 'epsilon': {'value': 0.3, 'scale': 'unit'}, 'sources': ['cifar']}
        self.assertConfigError(with_changes(attacks=[attack]), "unknown data source 'cifar'")
        defense = {'name': 'bg', 'kind': 'background', 'sources': ['cifar']}
        self.assertConfigError(with_changes(defenses=[defense]), "unknown OOD source 'cifar'")

    def test_even_median_kernel(self):
        self.assertConfigError(with_changes(detectors=[{'name': 's', 'kind': 'feature-squeezing',
                                                        'median_kernel': 4}]), 'median_kernel')

    def test_linf_epsilon_range(self):
        attack = {'name': 'p', 'kind': 'pgd', 'epsilon': {'value': 300, 'scale': 'byte'}}
        self.assertConfigError(with_changes(attacks=[attack]), 'pixel range')

    def test_model_source(self):
        self.assertConfigError(with_changes(model={}), 'exactly one')

    def test_unlabelled_in_data(self):
        self.assertConfigError(with_changes(in_data={'kind': 'gaussian'}), 'needs labels')

    def test_unknown_keys(self):
        self.assertConfigError(with_changes(experiment={'nmae': 'typo'}), 'experiment.nmae')

    def test_not_a_mapping(self):
        with self.assertRaises(ConfigError):
            config_from_dict(['model'])


class TestFilesAndEnvironment(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_relative_to_config_dir(self):
        (self.tmp_dir / 'images.idx').write_bytes(b'')
        self.assertEqual(resolve_path('images.idx', self.tmp_dir), (self.tmp_dir / 'images.idx').resolve())

    def test_data_dir_fallback(self):
        (self.tmp_dir / 'ood').mkdir()
        with mock.patch.dict(os.environ, {'OPENWORLD_DATA_DIR': str(self.tmp_dir)}):
            self.assertEqual(resolve_path('ood', Path('/nonexistent')), (self.tmp_dir / 'ood').resolve())

    def test_missing_path(self):
        with mock.patch.dict(os.environ, {'OPENWORLD_DATA_DIR': ''}):
            with self.assertRaises(ValueError):
                resolve_path('absent.idx', self.tmp_dir)
            data = with_changes(ood_data=[{'name': 'pgm', 'kind': 'pgm-folder', 'path': 'absent'}])
            with self.assertRaises(ConfigError):
                config_from_dict(data, base_dir=self.tmp_dir)

    def test_environment_defaults(self):
        with mock.patch.dict(os.environ, {'OPENWORLD_OUTPUT_DIR': str(self.tmp_dir), 'OPENWORLD_WORKERS': '0'}):
            self.assertEqual(default_output_dir(), self.tmp_dir)
            self.assertEqual(default_workers(), 1)
            self.assertEqual(ExperimentSection(name='run').output_path, self.tmp_dir / 'run')
        with mock.patch.dict(os.environ, {'OPENWORLD_WORKERS': 'many'}):
            with self.assertRaises(ConfigError):
                default_workers()

    def test_load_errors(self):
        with self.assertRaises(ConfigError):
            load_config(self.tmp_dir / 'missing.yaml')
        bad = self.tmp_dir / 'bad.yaml'
        bad.write_text('model: [unclosed\n', encoding='utf-8')
        with self.assertRaises(ConfigError):
            load_config(bad)

    def test_paths_resolve_against_config_file(self):
        (self.tmp_dir / 'noise').mkdir()
        data = with_changes(ood_data=[{'name': 'noise', 'kind': 'pgm-folder', 'path': 'noise'}])
        path = self.tmp_dir / 'exp.yaml'
        path.write_text(yaml.safe_dump(data), encoding='utf-8')
        cfg = load_config(path)
        self.assertEqual(cfg.ood_data[0].path, (self.tmp_dir / 'noise').resolve())


if __name__ == '__main__':
    unittest.main()
