import unittest

import numpy as np

from openworld_bench.adv_detectors import (FeatureSqueezing, MagNet, MagnetConfig, SqueezerConfig,
                                           bit_depth_reduce, calibrate_benign_threshold, fs_detect, fs_scores,
                                           gaussian_smooth, magnet_detect, magnet_reform, magnet_train,
                                           median_filter)
from openworld_bench.autodiff import Tensor
from openworld_bench.datasets import UnlabeledDataset, gen_gaussian_noise_ood, gen_synthetic_shapes
from openworld_bench.models import TrainConfig, build_autoencoder, build_classifier, train_classifier
from openworld_bench.ood_detectors import (DetectorError, DetectorVerdict, OdinConfig, OodDetector, baseline_score,
                                           baseline_scores, calibrate_threshold, detect, kl_to_uniform, odin_score,
                                           odin_scores, train_confidence_calibrated, tune_odin)


class TestVerdict(unittest.TestCase):

    def test_ood_flags_strictly_below(self):
        self.assertTrue(DetectorVerdict(0.4, 0.5).is_ood)
        self.assertFalse(DetectorVerdict(0.5, 0.5).flagged)

    def test_adversarial_flags_strictly_above(self):
        self.assertTrue(DetectorVerdict(0.6, 0.5, 'adversarial').is_adversarial)
        self.assertFalse(DetectorVerdict(0.5, 0.5, 'adversarial').flagged)
        self.assertFalse(DetectorVerdict(0.6, 0.5, 'adversarial').is_ood)


class TestThresholds(unittest.TestCase):

    def test_tpr_threshold(self):
        self.assertEqual(calibrate_threshold([0.9, 0.8, 0.7, 0.6, 0.5], 0.8), 0.6)

    def test_tpr_threshold_keeps_target_share(self):
        scores = np.random.default_rng(0).uniform(size=101)
        threshold = calibrate_threshold(scores, 0.95)
        self.assertGreaterEqual(np.mean(scores >= threshold), 0.95)

    def test_fpr_threshold(self):
        self.assertEqual(calibrate_benign_threshold([0.1, 0.2, 0.3, 0.4], 0.25), 0.3)

    def test_fpr_threshold_bounds_false_positives(self):
        scores = np.random.default_rng(1).uniform(size=200)
        threshold = calibrate_benign_threshold(scores, 0.05)
        self.assertLessEqual(np.mean(scores > threshold), 0.05)

    def test_empty_scores(self):
        with self.assertRaises(DetectorError):
            calibrate_threshold([], 0.95)
        with self.assertRaises(DetectorError):
            calibrate_benign_threshold([], 0.05)


class TestOodDetectors(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.in_data = gen_synthetic_shapes(120, (1, 8, 8), ['bars', 'crosses'], seed=0)
        cls.ood = gen_gaussian_noise_ood(60, (1, 8, 8), seed=1)
        cls.model = build_classifier('mlp2', (1, 8, 8), cls.in_data.label_names, seed=0, hidden=16)
        train_classifier(cls.model, cls.in_data, TrainConfig(epochs=5, batch_size=16, learning_rate=0.01))

    def test_uniform_logits_score_one_over_k(self):
        model = build_classifier('linear', (1, 4, 4), [str(i) for i in range(10)], zero_final=True)
        self.assertAlmostEqual(baseline_score(model, np.zeros((1, 4, 4))), 0.1)
        self.assertAlmostEqual(detect(model, 'odin', OdinConfig(), 0.5, np.zeros((1, 4, 4))).score, 0.1)

    def test_temperature_flattens_scores(self):
        images = self.in_data.images[:10]
        hot = odin_scores(self.model, images, OdinConfig(1000.0, 0.0))
        self.assertTrue(np.all(hot <= baseline_scores(self.model, images) + 1e-12))

    def test_single_input_score_matches_batch(self):
        x = self.ood.images[0]
        self.assertAlmostEqual(odin_score(self.model, x, OdinConfig(1.0, 0.0)), baseline_score(self.model, x))
        cfg = OdinConfig(1000.0, 0.0014)
        self.assertAlmostEqual(odin_score(self.model, x, cfg), float(odin_scores(self.model, x[None], cfg)[0]))

    def test_preprocessing_raises_scores(self):
        images = np.full((3, 1, 8, 8), 0.5)
        plain = odin_scores(self.model, images, OdinConfig(1.0, 0.0))
        nudged = odin_scores(self.model, images, OdinConfig(1.0, 0.001))
        self.assertTrue(np.all(nudged > plain))

    def test_calibrated_threshold_meets_tpr(self):
        detector = OodDetector('baseline', target_tpr=0.9)
        threshold = detector.calibrate(self.model, self.in_data.images)
        scores = detector.scores(self.model, self.in_data.images)
        self.assertGreaterEqual(np.mean(scores >= threshold), 0.9)
        verdicts = detector.verdicts(self.model, self.in_data.images)
        self.assertLessEqual(np.mean([v.flagged for v in verdicts]), 0.1)

    def test_record_round_trip(self):
        detector = OodDetector('odin', threshold=0.3, odin=OdinConfig(10.0, 0.0028))
        again = OodDetector.from_dict(detector.to_dict())
        self.assertEqual(again, detector)
        self.assertEqual(detector.name, 'odin(T=10,eps=0.0028)')

    def test_unknown_kind(self):
        with self.assertRaises(DetectorError):
            OodDetector('mahalanobis')

    def test_tuning_picks_from_grid(self):
        cfg, score = tune_odin(self.model, self.in_data.images[:30], self.ood.images[:30],
                               temperatures=(1.0, 100.0), epsilons=(0.0, 0.0014))
        self.assertIn(cfg.temperature, (1.0, 100.0))
        self.assertIn(cfg.preprocess_epsilon, (0.0, 0.0014))
        self.assertTrue(0.0 <= score <= 1.0)

    def test_kl_to_uniform_of_flat_logits_is_zero(self):
        self.assertAlmostEqual(kl_to_uniform(Tensor(np.zeros((2, 5)))).item(), 0.0)

    def test_zero_beta_matches_plain_training(self):
        cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.01, seed=3)
        plain = build_classifier('linear', (1, 8, 8), self.in_data.label_names, seed=5)
        calibrated = build_classifier('linear', (1, 8, 8), self.in_data.label_names, seed=5)
        train_classifier(plain, self.in_data, cfg)
        report = train_confidence_calibrated(calibrated, self.in_data, self.ood, beta=0.0, cfg=cfg)
        for name, param in plain.params.items():
            np.testing.assert_allclose(calibrated.params[name].data, param.data)
        self.assertNotIn('kl', report.extra_curves)

    def test_calibrated_training_tracks_kl(self):
        model = build_classifier('linear', (1, 8, 8), self.in_data.label_names, seed=5)
        report = train_confidence_calibrated(model, self.in_data, self.ood, beta=1.0,
                                             cfg=TrainConfig(epochs=2, batch_size=16, learning_rate=0.01))
        self.assertEqual(len(report.extra_curves['kl']), 2)

    def test_empty_proxy_rejected(self):
        empty = UnlabeledDataset(np.zeros((0, 1, 8, 8)), 'empty')
        with self.assertRaises(DetectorError):
            train_confidence_calibrated(self.model, self.in_data, empty)


class TestSqueezers(unittest.TestCase):

    def test_bit_depth_rounds_half_up(self):
        self.assertEqual(bit_depth_reduce(np.array([0.4, 0.5, 0.6]), 1).tolist(), [0.0, 1.0, 1.0])
        np.testing.assert_allclose(bit_depth_reduce(np.array([0.2]), 2), [1 / 3])

    def test_bit_depth_range(self):
        with self.assertRaises(DetectorError):
            bit_depth_reduce(np.zeros(2), 0)

    def test_median_removes_isolated_spike(self):
        image = np.zeros((1, 1, 5, 5))
        image[0, 0, 2, 2] = 1.0
        np.testing.assert_array_equal(median_filter(image, 3), np.zeros((1, 1, 5, 5)))

    def test_median_kernel_must_be_odd(self):
        with self.assertRaises(DetectorError):
            median_filter(np.zeros((1, 1, 4, 4)), 2)
        with self.assertRaises(ValueError):
            SqueezerConfig(median_kernel=4)

    def test_smoothing_keeps_flat_images(self):
        np.testing.assert_allclose(gaussian_smooth(np.full((1, 1, 6, 6), 0.3)), np.full((1, 1, 6, 6), 0.3))

    def test_squeezer_order_is_fixed(self):
        cfg = SqueezerConfig(enabled=('smoothing', 'bit-depth'))
        self.assertEqual([name for name, _ in cfg.squeezers()], ['bit-depth', 'smoothing'])


class TestFeatureSqueezing(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.data = gen_synthetic_shapes(80, (1, 8, 8), ['bars', 'rings'], seed=2)
        cls.model = build_classifier('mlp2', (1, 8, 8), cls.data.label_names, seed=1, hidden=16)
        train_classifier(cls.model, cls.data, TrainConfig(epochs=3, batch_size=16, learning_rate=0.01))

    def test_scores_are_bounded(self):
        scores = fs_scores(self.model, gen_gaussian_noise_ood(20, (1, 8, 8)).images, SqueezerConfig())
        self.assertTrue(np.all((scores >= 0.0) & (scores <= 2.0)))

    def test_uniform_model_scores_zero(self):
        model = build_classifier('linear', (1, 8, 8), ['a', 'b'], zero_final=True)
        np.testing.assert_allclose(fs_scores(model, self.data.images[:5], SqueezerConfig()), np.zeros(5))

    def test_calibration_on_benign_data(self):
        detector = FeatureSqueezing(SqueezerConfig(bit_depth=2), fpr_target=0.1)
        threshold = detector.calibrate(self.model, self.data.images)
        flagged = [v.flagged for v in detector.verdicts(self.model, self.data.images)]
        self.assertLessEqual(np.mean(flagged), 0.1)
        verdict = fs_detect(self.model, self.data.images[0], detector.config, threshold)
        self.assertEqual(verdict.polarity, 'adversarial')
        self.assertEqual(detector.name, 'fs(bit-depth+median)')
        self.assertEqual(detector.to_dict()['smoothing'], 'smoothing-simplified')


class TestMagNet(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.data = gen_synthetic_shapes(64, (1, 8, 8), ['bars', 'crosses'], seed=3)
        cls.autoencoder = build_autoencoder((1, 8, 8), seed=0)
        cls.report = magnet_train(cls.autoencoder, cls.data, noise_level=0.1,
                                  cfg=TrainConfig(epochs=3, batch_size=16, learning_rate=0.01))

    def test_training_lowers_reconstruction_error(self):
        self.assertLess(self.report.final_error, self.report.initial_error)
        self.assertEqual(len(self.report.loss_curve), 3)

    def test_differentiable_score_matches_batch_score(self):
        for norm in ('l1', 'l2'):
            magnet = MagNet(self.autoencoder, MagnetConfig(recon_norm=norm))
            x = self.data.images[4]
            self.assertAlmostEqual(magnet.score_tensor(Tensor(x)).item(), float(magnet.scores(x)[0]), places=10)

    def test_reform_stays_in_box(self):
        magnet = MagNet(self.autoencoder)
        reformed = magnet.reform(self.data.images[:4])
        self.assertEqual(reformed.shape, (4, 1, 8, 8))
        self.assertTrue(np.all((reformed >= 0.0) & (reformed <= 1.0)))
        single = magnet_reform(self.data.images[0], magnet)
        self.assertEqual(single.shape, (1, 8, 8))
        np.testing.assert_allclose(single, reformed[0])

    def test_calibration_bounds_benign_flags(self):
        magnet = MagNet(self.autoencoder, MagnetConfig(fpr_target=0.05))
        threshold = magnet.calibrate(self.data.images)
        self.assertLessEqual(np.mean([v.flagged for v in magnet.verdicts(self.data.images)]), 0.05)
        self.assertEqual(magnet_detect(self.data.images[0], magnet).threshold, threshold)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            MagnetConfig(recon_norm='linf')
        with self.assertRaises(DetectorError):
            magnet_train(build_autoencoder((1, 8, 8)), self.data, noise_level=-0.1)


if __name__ == '__main__':
    unittest.main()
