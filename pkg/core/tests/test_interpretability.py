import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DatasetError, ShapeError, UnsupportedLayerError
from core.interpretability import (
    CuiCurve, candidate_coverage, cde_candidates, cui_curve, cui_layers, gradcam_alpha, gradcam_map,
    gradients_baseline_curve, per_class_curves, per_image_cui, per_image_curve, randomize_deeper_layers,
    sanity_check, select_split_points,
)
from core.network import build_model

from .helpers import tiny_dataset, toy_model


def _curve(values) -> CuiCurve:
    layers = dict(enumerate(values))
    return CuiCurve(values=layers, layer_names={i: f"l{i}" for i in layers}, scope='general', reduction='sum')


class GradCamOracleTestCase(SimpleTestCase):
    """
    Rede toy: conv → relu → maxpool → flatten → dense.

    Na saída do maxpool o gradiente do logit c é a linha c do dense
    redimensionada, por isso α e o mapa têm forma fechada.
    """

    def setUp(self):
        self.model = toy_model(seed=4)
        self.image = np.random.default_rng(4).normal(size=(2, 6, 6))
        self.layer = 2

    def _features(self):
        features = self.model.slice(0, self.layer + 1).forward(self.image)
        weights = self.model.params[(4, 'weight')]
        return features, weights

    def test_alpha_matches_closed_form(self):
        features, weights = self._features()
        for class_index in range(4):
            expected = weights[class_index].reshape(features.shape).mean(axis=(1, 2))
            alpha = gradcam_alpha(self.model, self.image, class_index, self.layer)
            np.testing.assert_allclose(alpha.values, expected, rtol=0, atol=1e-10)

    def test_map_matches_closed_form(self):
        features, weights = self._features()
        for class_index in range(4):
            alpha = weights[class_index].reshape(features.shape).mean(axis=(1, 2))
            expected = np.maximum(np.tensordot(alpha, features, axes=1), 0)
            result = gradcam_map(self.model, self.image, class_index, self.layer)
            self.assertEqual(result.map.shape, (3, 3))
            np.testing.assert_allclose(result.map, expected, rtol=0, atol=1e-10)
            self.assertAlmostEqual(per_image_cui(result), float(expected.sum()), delta=1e-10)
            self.assertAlmostEqual(per_image_cui(result, 'mean'), float(expected.mean()), delta=1e-10)

    def _by_hand(self, class_index: int) -> dict:
        """Forward e regra da cadeia escritos à mão para as camadas 0 (conv) e 1 (relu)."""
        kernel, bias = self.model.params[(0, 'weight')], self.model.params[(0, 'bias')]
        padded = np.pad(self.image, ((0, 0), (1, 1), (1, 1)))
        conv = np.empty((3, 6, 6))
        for k in range(3):
            for y in range(6):
                for x in range(6):
                    conv[k, y, x] = bias[k] + np.sum(kernel[k] * padded[:, y:y + 3, x:x + 3])
        rectified = np.where(conv > 0, conv, 0.0)

        # dense -> flatten -> maxpool: o gradiente vai para o primeiro máximo de cada janela 2x2
        grad_pooled = self.model.params[(4, 'weight')][class_index].reshape(3, 3, 3)
        grad_rectified = np.zeros((3, 6, 6))
        for k in range(3):
            for i in range(3):
                for j in range(3):
                    a, b = divmod(int(np.argmax(rectified[k, 2 * i:2 * i + 2, 2 * j:2 * j + 2])), 2)
                    grad_rectified[k, 2 * i + a, 2 * j + b] = grad_pooled[k, i, j]
        grad_conv = grad_rectified * (conv > 0)
        return {0: (conv, grad_conv), 1: (rectified, grad_rectified)}

    def test_chain_rule_through_pool_and_relu(self):
        for class_index in range(4):
            for layer, (features, gradient) in self._by_hand(class_index).items():
                alpha = gradient.mean(axis=(1, 2))
                expected = np.maximum(np.einsum('k,khw->hw', alpha, features), 0)
                with self.subTest(class_index=class_index, layer=layer):
                    result = gradcam_alpha(self.model, self.image, class_index, layer)
                    np.testing.assert_allclose(result.values, alpha, rtol=0, atol=1e-10)
                    result = gradcam_map(self.model, self.image, class_index, layer)
                    self.assertEqual(result.map.shape, (6, 6))
                    np.testing.assert_allclose(result.map, expected, rtol=0, atol=1e-10)

    def test_maps_are_non_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            image = rng.normal(size=(2, 6, 6))
            for layer in cui_layers(self.model):
                for class_index in range(4):
                    self.assertGreaterEqual(gradcam_map(self.model, image, class_index, layer).map.min(), 0.0)

    def test_scaling_last_layer_doubles_maps(self):
        params = dict(self.model.params)
        params[(4, 'weight')] = params[(4, 'weight')] * 2
        params[(4, 'bias')] = params[(4, 'bias')] * 2
        scaled = self.model.with_params(params)
        for layer in cui_layers(self.model):
            original = gradcam_map(self.model, self.image, 1, layer).map
            np.testing.assert_array_equal(gradcam_map(scaled, self.image, 1, layer).map, 2 * original)

    def test_zero_input_with_zero_bias_gives_zero_map(self):
        params = {key: (np.zeros_like(value) if key[1] == 'bias' else value)
                  for key, value in self.model.params.items()}
        model = self.model.with_params(params)
        result = gradcam_map(model, np.zeros((2, 6, 6)), 0, 0)
        np.testing.assert_array_equal(result.map, np.zeros((6, 6)))
        self.assertEqual(per_image_cui(result), 0.0)

    def test_unsupported_layer_and_class(self):
        with self.assertRaises(UnsupportedLayerError):
            gradcam_map(self.model, self.image, 0, 4)
        with self.assertRaises(UnsupportedLayerError):
            gradcam_map(self.model, self.image, 0, 9)
        for class_index in (4, -1):
            with self.subTest(class_index=class_index), self.assertRaises(ShapeError):
                gradcam_map(self.model, self.image, class_index, 0)
        with self.assertRaises(ShapeError):
            gradcam_alpha(self.model, self.image, 4, 0)

    def test_unknown_reduction(self):
        with self.assertRaises(ValueError):
            per_image_cui(np.ones((2, 2)), 'median')


class CuiCurveTestCase(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = build_model('vgg-nano', (1, 16, 16), 4, seed=0, dtype=np.float64)
        cls.dataset = tiny_dataset().subset('train')

    def test_layers_are_spatial_only(self):
        curve = cui_curve(self.model, self.dataset)
        self.assertEqual(curve.layers(), [0, 1, 2, 3, 4, 5])
        self.assertEqual(curve.layer_names[2], 'block1_pool')
        self.assertEqual(curve.scope, 'general')
        self.assertTrue(all(value >= 0 for value in curve.values.values()))

    def test_parallelism_gives_identical_curves(self):
        single = cui_curve(self.model, self.dataset, parallelism=1)
        threaded = cui_curve(self.model, self.dataset, parallelism=4)
        np.testing.assert_array_equal(single.as_array(), threaded.as_array())

    def test_class_subset_matches_per_class_curve(self):
        per_class = per_class_curves(self.model, self.dataset)
        for label in (0, 3):
            restricted = cui_curve(self.model, self.dataset, class_subset=[label])
            self.assertEqual(restricted.scope, 'class')
            np.testing.assert_allclose(restricted.as_array(), per_class[label].as_array(), rtol=1e-10)

    def test_single_image_curve_matches_image_maps(self):
        image, label = self.dataset.images[0], int(self.dataset.labels[0])
        curve = per_image_curve(self.model, image, label)
        self.assertEqual(curve.scope, 'image')
        for layer in curve.layers():
            expected = per_image_cui(gradcam_map(self.model, image, label, layer))
            self.assertAlmostEqual(curve.values[layer], expected, delta=1e-9 * max(1.0, expected))

    def test_class_balanced_on_balanced_set(self):
        balanced = tiny_dataset(per_class=8).restrict([0, 1])
        plain = cui_curve(self.model, balanced)
        weighted = cui_curve(self.model, balanced, class_balanced=True)
        np.testing.assert_allclose(plain.as_array(), weighted.as_array(), rtol=1e-12)

    def test_empty_subset(self):
        with self.assertRaises(DatasetError):
            cui_curve(self.model, self.dataset.restrict([]))

    def test_gradients_baseline(self):
        curve = gradients_baseline_curve(self.model, self.dataset)
        self.assertEqual(curve.method, 'gradients')
        values = curve.as_array()
        self.assertTrue(np.all(np.isfinite(values)))
        self.assertTrue(np.all(values >= 0))

    def test_gradients_map_is_constant(self):
        image = self.dataset.images[1]
        for layer in cui_layers(self.model):
            alpha = gradcam_alpha(self.model, image, 2, layer).values
            result = gradcam_map(self.model, image, 2, layer, method='gradients').map
            np.testing.assert_allclose(result, np.full(result.shape, max(alpha.sum(), 0.0)), rtol=1e-12)


class SplitPointSelectionTestCase(SimpleTestCase):

    def test_local_maxima_ranked_by_value(self):
        self.assertEqual(select_split_points(_curve([1, 3, 2, 5, 4])), [3, 1])

    def test_monotone_curve_picks_last(self):
        self.assertEqual(select_split_points(_curve([1, 2, 3, 4])), [3])

    def test_plateau_picks_deepest(self):
        self.assertEqual(select_split_points(_curve([1, 3, 3, 2])), [2])

    def test_first_element_can_be_candidate(self):
        self.assertEqual(select_split_points(_curve([5, 1, 2])), [0, 2])

    def test_ties_prefer_deeper(self):
        self.assertEqual(select_split_points(_curve([4, 1, 4])), [2, 0])
        self.assertEqual(_curve([4, 1, 4]).argmax(), 2)

    def test_constant_curve(self):
        self.assertEqual(select_split_points(_curve([2, 2, 2])), [2])

    def test_cde_candidates(self):
        self.assertEqual(cde_candidates([64, 64, 32, 32, 16]), [1, 3])
        self.assertEqual(cde_candidates([1, 2, 3]), [])

    def test_candidate_coverage(self):
        report = candidate_coverage([1, 3], _curve([1, 3, 2, 5, 4]))
        self.assertEqual(report['cui'], [3, 1])
        self.assertEqual(report['covered'], [1, 3])
        self.assertTrue(report['all_covered'])
        report = candidate_coverage([0, 4], _curve([1, 2, 5, 2, 1]))
        self.assertEqual(report['covered'], [])
        self.assertEqual(report['cui_only'], [2])


class SanityCheckTestCase(SimpleTestCase):

    def setUp(self):
        self.model = build_model('vgg-nano', (1, 16, 16), 4, seed=1, dtype=np.float64)
        self.image = tiny_dataset().images[5].astype(np.float64)

    def test_exact_copy_has_zero_divergence(self):
        self.assertEqual(sanity_check(self.model, self.image, 3, seed=None), 0.0)

    def test_randomized_deeper_layers_change_the_map(self):
        self.assertGreater(sanity_check(self.model, self.image, 0, seed=7, class_index=0), 0.0)

    def test_divergence_over_twenty_seeds(self):
        for layer in (0, 3):
            # uma classe cujo mapa de referência não é nulo
            class_index = next(c for c in range(4) if gradcam_map(self.model, self.image, c, layer).map.sum() > 0)
            for seed in range(20):
                with self.subTest(layer=layer, seed=seed):
                    self.assertGreater(sanity_check(self.model, self.image, layer, seed=seed,
                                                    class_index=class_index), 0.0)

    def test_randomize_keeps_shallow_layers(self):
        randomized = randomize_deeper_layers(self.model, 3, seed=7)
        for (index, role), value in self.model.params.items():
            if index <= 3:
                np.testing.assert_array_equal(randomized.params[(index, role)], value)
            else:
                self.assertFalse(np.array_equal(randomized.params[(index, role)], value))
