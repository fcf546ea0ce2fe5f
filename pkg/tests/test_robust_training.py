import unittest

import numpy as np

from openworld_bench.attacks import AttackConfig, PerturbationConstraint
from openworld_bench.datasets import gen_gaussian_noise_ood, gen_synthetic_shapes
from openworld_bench.models import TrainConfig, build_classifier, confidences, train_classifier, with_extra_classes
from openworld_bench.robust_training import (BackgroundConfig, RobustTrainConfig, TrainingError, adversarial_train,
                                             alp_train, background_class_train, background_pool,
                                             default_inner_attack, inner_maximize, ood_rejection_rate,
                                             restricted_confidences)


class TestInnerAttack(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.data = gen_synthetic_shapes(32, (1, 8, 8), seed=0)
        cls.model = build_classifier('mlp2', (1, 8, 8), cls.data.label_names, seed=0, hidden=16)
        train_classifier(cls.model, cls.data, TrainConfig(epochs=3, batch_size=8, learning_rate=0.01))

    def test_default_step(self):
        cfg = default_inner_attack(PerturbationConstraint('linf', 0.2))
        self.assertEqual(cfg.max_iters, 10)
        self.assertAlmostEqual(cfg.step_size, 0.05)

    def test_zero_epsilon_is_identity(self):
        attack = default_inner_attack(PerturbationConstraint('linf', 0.0))
        x = self.data.images[:4]
        np.testing.assert_array_equal(inner_maximize(self.model, x, self.data.labels[:4], attack), x)

    def test_linf_ball_respected(self):
        attack = default_inner_attack(PerturbationConstraint('linf', 0.1))
        x = self.data.images[:8]
        x_adv = inner_maximize(self.model, x, self.data.labels[:8], attack)
        self.assertLessEqual(np.abs(x_adv - x).max(), 0.1 + 1e-12)
        self.assertTrue(0.0 <= x_adv.min() and x_adv.max() <= 1.0)

    def test_l2_ball_respected(self):
        attack = default_inner_attack(PerturbationConstraint('l2', 0.5))
        x = self.data.images[:8]
        x_adv = inner_maximize(self.model, x, self.data.labels[:8], attack)
        radii = np.linalg.norm((x_adv - x).reshape(8, -1), axis=1)
        self.assertTrue(np.all(radii <= 0.5 + 1e-9))


class TestAdversarialTraining(unittest.TestCase):

    def setUp(self):
        self.data = gen_synthetic_shapes(24, (1, 8, 8), seed=1)
        self.base = TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, seed=3)

    def fresh_model(self, **kwargs):
        return build_classifier('linear', (1, 8, 8), self.data.label_names, seed=5, **kwargs)

    def test_alpha_one_matches_plain_training(self):
        plain = self.fresh_model()
        train_classifier(plain, self.data, self.base)
        robust = self.fresh_model()
        adversarial_train(robust, self.data, RobustTrainConfig(alpha=1.0, base=self.base))
        for name, param in plain.params.items():
            np.testing.assert_allclose(robust.params[name].data, param.data)

    def test_adversarial_report(self):
        cfg = RobustTrainConfig(alpha=0.5, base=self.base,
                                inner_attack=default_inner_attack(PerturbationConstraint('linf', 0.1), steps=3))
        report = adversarial_train(self.fresh_model(), self.data, cfg)
        self.assertEqual(len(report.loss_curve), 2)
        self.assertEqual(report.extra_curves, {})

    def test_pairing_curve(self):
        cfg = RobustTrainConfig(alpha=0.5, base=self.base, alp_weight=0.5,
                                inner_attack=default_inner_attack(PerturbationConstraint('linf', 0.1), steps=2))
        report = alp_train(self.fresh_model(), self.data, cfg)
        self.assertEqual(len(report.extra_curves['pairing']), 2)
        self.assertTrue(all(value >= 0 for value in report.extra_curves['pairing']))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            RobustTrainConfig(alpha=1.5)
        with self.assertRaises(ValueError):
            RobustTrainConfig(alp_weight=-1.0)
        with self.assertRaises(ValueError):
            BackgroundConfig(mix_alpha=2.0)


class TestBackgroundClasses(unittest.TestCase):

    def setUp(self):
        self.data = gen_synthetic_shapes(24, (1, 8, 8), seed=2)
        self.noise = gen_gaussian_noise_ood(30, (1, 8, 8), seed=4)
        self.rings = gen_synthetic_shapes(30, (1, 8, 8), class_set=('rings', 'boxes'), seed=5).as_unlabeled('rings')

    def test_pool_labels_follow_source_order(self):
        cfg = BackgroundConfig([self.noise, self.rings], samples_per_source=10)
        images, labels = background_pool(cfg, num_in_classes=2, seed=0)
        self.assertEqual(images.shape, (20, 1, 8, 8))
        self.assertEqual(labels.tolist(), [2] * 10 + [3] * 10)

    def test_shared_background_class(self):
        cfg = BackgroundConfig([self.noise, self.rings], samples_per_source=5, one_class_per_source=False)
        self.assertEqual(cfg.num_background, 1)
        _, labels = background_pool(cfg, num_in_classes=2, seed=0)
        self.assertEqual(set(labels.tolist()), {2})

    def test_output_count_checked(self):
        model = build_classifier('linear', (1, 8, 8), self.data.label_names)
        cfg = RobustTrainConfig(background=BackgroundConfig([self.noise], samples_per_source=10))
        with self.assertRaises(TrainingError):
            background_class_train(model, self.data, cfg)

    def test_background_training_rejects_noise(self):
        base = build_classifier('linear', (1, 8, 8), self.data.label_names, seed=0)
        model = with_extra_classes(base, ['gaussian'], seed=0)
        cfg = RobustTrainConfig(alpha=1.0, base=TrainConfig(epochs=8, batch_size=8, learning_rate=0.05),
                                background=BackgroundConfig([self.noise], samples_per_source=30))
        report = background_class_train(model, self.data, cfg)
        self.assertEqual(len(report.loss_curve), 8)
        self.assertGreater(ood_rejection_rate(model, self.noise), 50.0)

    def test_rejection_rate_without_background(self):
        model = build_classifier('linear', (1, 8, 8), self.data.label_names)
        self.assertEqual(ood_rejection_rate(model, self.noise), 0.0)

    def test_restricted_confidences_renormalise(self):
        model = with_extra_classes(build_classifier('linear', (1, 8, 8), self.data.label_names), ['gaussian'])
        probs = restricted_confidences(model, self.noise.images[:5])
        self.assertEqual(probs.shape, (5, 2))
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(5))
        full = confidences(model, self.noise.images[:5])
        np.testing.assert_allclose(probs[:, 0] / probs[:, 1], full[:, 0] / full[:, 1])


if __name__ == '__main__':
    unittest.main()
