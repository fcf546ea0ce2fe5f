import unittest

import numpy as np

from openworld_bench import autodiff as ad
from openworld_bench.autodiff import ShapeError, Tensor
from openworld_bench.datasets import LabeledDataset
from openworld_bench.models import (SGD, ModelError, TrainConfig, build_autoencoder, build_classifier,
                                    confidences, evaluate_model, logits, predict, predict_batch, train_classifier,
                                    with_extra_classes)


def brightness_dataset(count=40, seed=0):
    """Two linearly separable classes: dark and bright 4x4 images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    images = np.where(labels[:, None, None, None] == 1, 0.8, 0.2) + rng.uniform(-0.1, 0.1, (count, 1, 4, 4))
    return LabeledDataset(images, labels, ['dark', 'bright'], name='brightness')


class TestConstruction(unittest.TestCase):

    def test_unknown_architecture(self):
        with self.assertRaises(ModelError):
            build_classifier('resnet', (1, 4, 4), ['a', 'b'])

    def test_cnn_needs_channel_axis(self):
        with self.assertRaises(ModelError):
            build_classifier('cnn_s', (28, 28), ['a', 'b'])

    def test_needs_a_class(self):
        with self.assertRaises(ModelError):
            build_classifier('linear', (1, 4, 4), [])

    def test_same_seed_same_parameters(self):
        first = build_classifier('mlp2', (1, 4, 4), ['a', 'b'], seed=3, hidden=8)
        second = build_classifier('mlp2', (1, 4, 4), ['a', 'b'], seed=3, hidden=8)
        for name, param in first.params.items():
            np.testing.assert_array_equal(param.data, second.params[name].data)
        self.assertEqual(first.params['fc1.weight'].shape, (16, 8))

    def test_background_classes_follow_in_classes(self):
        model = build_classifier('linear', (1, 4, 4), ['a', 'b', 'c'], background_names=['noise', 'shapes'])
        self.assertEqual(model.num_classes, 5)
        self.assertEqual(model.num_in_classes, 3)
        self.assertEqual(model.background_indices, [3, 4])
        twin = with_extra_classes(model, ['gaussian'])
        self.assertEqual(twin.label_names, ['a', 'b', 'c', 'gaussian'])

    def test_autoencoder_output_matches_input(self):
        autoencoder = build_autoencoder((1, 8, 8), seed=0)
        out = autoencoder.forward(Tensor(np.full((2, 1, 8, 8), 0.5)))
        self.assertEqual(out.data.size, 2 * 64)
        self.assertTrue(np.all((out.data > 0) & (out.data < 1)))


class TestInference(unittest.TestCase):

    def setUp(self):
        self.model = build_classifier('cnn_s', (1, 8, 8), ['a', 'b', 'c'], seed=1)

    def test_logits_shapes(self):
        single = logits(self.model, np.zeros((1, 8, 8)))
        batch = logits(self.model, np.zeros((4, 1, 8, 8)))
        self.assertEqual(single.shape, (3,))
        self.assertEqual(batch.shape, (4, 3))

    def test_wrong_input_shape(self):
        with self.assertRaises(ShapeError):
            logits(self.model, np.zeros((1, 7, 8)))

    def test_confidences_sum_to_one(self):
        probs = confidences(self.model, np.random.default_rng(0).uniform(size=(5, 1, 8, 8)))
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(5))

    def test_zero_logits_tie_to_lowest_class(self):
        model = build_classifier('linear', (1, 4, 4), ['a', 'b', 'c', 'd'], zero_final=True)
        cls, conf = predict(model, np.full((1, 4, 4), 0.3))
        self.assertEqual(cls, 0)
        self.assertAlmostEqual(conf, 0.25)

    def test_predict_batch_matches_predict(self):
        images = np.random.default_rng(2).uniform(size=(3, 1, 8, 8))
        classes, conf = predict_batch(self.model, images)
        for i, image in enumerate(images):
            cls, c = predict(self.model, image)
            self.assertEqual(cls, classes[i])
            self.assertAlmostEqual(c, conf[i])

    def test_inference_records_only_input_gradients(self):
        x = Tensor(np.zeros((1, 8, 8)), requires_grad=True)
        grads = ad.backward(ad.sum(logits(self.model, x)))
        self.assertEqual(grads[x].shape, (1, 8, 8))
        for param in self.model.params.values():
            self.assertNotIn(param, grads)


class TestTraining(unittest.TestCase):

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            TrainConfig(epochs=0)
        with self.assertRaises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with self.assertRaises(ValueError):
            TrainConfig(optimizer='rmsprop')

    def test_separable_data_is_learned(self):
        data = brightness_dataset()
        model = build_classifier('linear', data.input_shape, data.label_names, seed=0)
        report = train_classifier(model, data, TrainConfig(epochs=20, batch_size=8, learning_rate=0.05, seed=0))
        self.assertLess(report.final_loss, report.initial_loss)
        self.assertEqual(len(report.loss_curve), 20)
        self.assertEqual(evaluate_model(model, data).accuracy, 100.0)

    def test_zero_learning_rate_leaves_parameters(self):
        data = brightness_dataset()
        model = build_classifier('linear', data.input_shape, data.label_names, seed=0)
        before = model.snapshot()
        train_classifier(model, data, TrainConfig(epochs=1, learning_rate=0.0, optimizer='sgd'))
        for name, value in before.items():
            np.testing.assert_array_equal(model.params[name].data, value)

    def test_same_seed_same_training(self):
        data = brightness_dataset()
        runs = []
        for _ in range(2):
            model = build_classifier('linear', data.input_shape, data.label_names, seed=0)
            train_classifier(model, data, TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=7))
            runs.append(model.snapshot())
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_labels_outside_model_rejected_before_update(self):
        data = LabeledDataset(np.zeros((2, 1, 4, 4)), [0, 2], ['a', 'b', 'c'])
        model = build_classifier('linear', (1, 4, 4), ['a', 'b'], seed=0)
        before = model.snapshot()
        with self.assertRaises(ModelError):
            train_classifier(model, data, TrainConfig(epochs=1))
        np.testing.assert_array_equal(model.params['fc.weight'].data, before['fc.weight'])

    def test_sgd_step_is_learning_rate_times_gradient(self):
        grad = np.array([1.0, -2.0])
        self.assertTrue(np.allclose(SGD(0.5).delta('w', grad), [0.5, -1.0]))


class TestEvaluation(unittest.TestCase):

    def test_uniform_model(self):
        data = brightness_dataset(count=10)
        model = build_classifier('linear', data.input_shape, data.label_names, zero_final=True)
        evaluation = evaluate_model(model, data)
        self.assertEqual(evaluation.accuracy, 50.0)
        self.assertAlmostEqual(evaluation.mean_confidence, 0.5)
        self.assertFalse(evaluation.confidence_undefined)

    def test_no_correct_item_flags_undefined(self):
        data = LabeledDataset(np.zeros((3, 1, 4, 4)), [1, 1, 1], ['a', 'b'])
        model = build_classifier('linear', (1, 4, 4), ['a', 'b'], zero_final=True)
        evaluation = evaluate_model(model, data)
        self.assertEqual(evaluation.accuracy, 0.0)
        self.assertEqual(evaluation.mean_confidence, 0.0)
        self.assertTrue(evaluation.confidence_undefined)


if __name__ == '__main__':
    unittest.main()
