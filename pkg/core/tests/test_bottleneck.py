import math
import tempfile

import numpy as np
from django.test import SimpleTestCase

from core.bottleneck import (
    BottleneckSpec, assemble, build_bottleneck, finetune, head_features, init_bottleneck, load_split_artifacts,
    save_split_artifacts, train_ae,
)
from core.config import TrainConfig
from core.exceptions import BottleneckError, PhaseOrderError
from core.network import build_model

from .helpers import quick_config, tiny_dataset


class BottleneckArithmeticTestCase(SimpleTestCase):
    """Canais latentes, forma codificada e limite de compressão."""

    def test_reference_shape(self):
        spec = build_bottleneck((32, 16, 16), 0.9)
        self.assertEqual(spec.latent_channels, 51)
        self.assertEqual(spec.latent_shape, (51, 4, 4))
        self.assertEqual(spec.encoded_elements, 816)
        self.assertFalse(spec.budget_exceeded)

    def test_small_map(self):
        spec = build_bottleneck((1, 4, 4), 0.5)
        self.assertEqual(spec.latent_channels, 8)
        self.assertEqual(spec.encoded_elements, 8)

    def test_budget_below_one_channel_is_clamped(self):
        spec = build_bottleneck((1, 4, 4), 0.99)
        self.assertEqual(spec.latent_channels, 1)
        self.assertTrue(spec.budget_exceeded)

    def test_compression_bound_grid(self):
        shapes = [(1, 4, 4), (3, 5, 7), (8, 8, 8), (16, 9, 9), (32, 16, 16)]
        rates = [0.1, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9, 0.95, 0.97, 0.99]
        for shape in shapes:
            for rate in rates:
                with self.subTest(shape=shape, rate=rate):
                    spec = build_bottleneck(shape, rate)
                    if spec.budget_exceeded:
                        self.assertEqual(spec.latent_channels, 1)
                    else:
                        self.assertLessEqual(spec.encoded_elements, math.ceil((1 - rate) * math.prod(shape) + 1e-9))
                    self.assertEqual(spec.latent_shape[1:], (math.ceil(shape[1] / 4), math.ceil(shape[2] / 4)))

    def test_invalid_inputs(self):
        with self.assertRaises(BottleneckError):
            build_bottleneck((8, 3, 8), 0.5)
        with self.assertRaises(BottleneckError):
            build_bottleneck((8, 8), 0.5)
        for rate in (0.0, 1.0, -0.5, 1.5):
            with self.subTest(rate=rate), self.assertRaises(BottleneckError):
                build_bottleneck((8, 8, 8), rate)

    def test_decoder_restores_input_shape(self):
        for shape in [(2, 4, 4), (2, 5, 5), (2, 6, 6), (2, 7, 7), (2, 8, 8), (2, 6, 7), (3, 9, 4)]:
            with self.subTest(shape=shape):
                bottleneck = init_bottleneck(build_bottleneck(shape, 0.5), class_count=3)
                self.assertEqual(bottleneck.encoder.output_shape, bottleneck.spec.latent_shape)
                self.assertEqual(bottleneck.decoder.output_shape, shape)

    def test_mixed_parity_restores_shape(self):
        """Altura par e largura ímpar: o output_padding por eixo repõe 6x7."""
        spec = build_bottleneck((2, 6, 7), 0.5)
        bottleneck = init_bottleneck(spec, class_count=3, dtype=np.float64)
        self.assertEqual(spec.latent_shape, (10, 2, 2))
        self.assertEqual(bottleneck.decoder.output_shape, (2, 6, 7))
        features = np.random.default_rng(0).random((4, 2, 6, 7))
        self.assertEqual(bottleneck.autoencoder.forward(features).shape, (4, 2, 6, 7))

    def test_hidden_layer_widens_for_small_rates(self):
        self.assertEqual(build_bottleneck((32, 16, 16), 0.9).hidden_shape, (32, 8, 8))
        spec = build_bottleneck((3, 8, 8), 0.01)
        self.assertEqual(spec.latent_shape, (47, 2, 2))
        self.assertEqual(spec.hidden_shape, (24, 4, 4))
        self.assertGreaterEqual(math.prod(spec.hidden_shape), spec.encoded_elements)

    def test_spec_dict_round_trip(self):
        spec = build_bottleneck((8, 8, 8), 0.75, target_layer=2)
        self.assertEqual(BottleneckSpec.from_dict(spec.to_dict()), spec)


class BottleneckTrainingTestCase(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.dataset = tiny_dataset()
        cls.train = cls.dataset.subset('train')
        cls.model = build_model('vgg-nano', (1, 16, 16), 4, seed=0)
        cls.spec = build_bottleneck(cls.model.layers[2].output_shape, 0.75, target_layer=2)

    def test_zero_epochs_leaves_bottleneck_unchanged(self):
        initial = init_bottleneck(self.spec, 4, seed=0)
        trained = train_ae(self.model, initial, self.train, quick_config('ae', epochs=0))
        self.assertEqual(trained.history['ae'], [])
        self.assertEqual(trained.encoder.fingerprint(), initial.encoder.fingerprint())
        self.assertEqual(trained.decoder.fingerprint(), initial.decoder.fingerprint())

    def test_train_ae_keeps_model_frozen(self):
        before = self.model.fingerprint()
        trained = train_ae(self.model, self.spec, self.train, quick_config('ae', epochs=1))
        self.assertEqual(self.model.fingerprint(), before)
        self.assertEqual(trained.phases, ('ae',))
        self.assertEqual(len(trained.history['ae']), 1)
        self.assertTrue(np.isfinite(trained.history['ae'][0]['loss']))

    def test_finetune_requires_ae_phase(self):
        with self.assertRaises(PhaseOrderError):
            finetune(self.model, init_bottleneck(self.spec, 4), self.train, quick_config('finetune'))

    def test_finetune_with_override(self):
        plan, history = finetune(self.model, init_bottleneck(self.spec, 4), self.train,
                                 quick_config('finetune', epochs=1), allow_phase_override=True)
        self.assertEqual(len(history), 1)
        self.assertEqual(plan.bottleneck.phases, ('finetune',))

    def test_zero_learning_rate_keeps_accuracy_constant(self):
        trained = train_ae(self.model, self.spec, self.train, quick_config('ae', epochs=1))
        plan, history = finetune(self.model, trained, self.train, quick_config('finetune', epochs=3, lr=0.0))
        accuracies = [record['accuracy'] for record in history]
        self.assertEqual(len(set(accuracies)), 1)
        self.assertEqual(plan.bottleneck.phases, ('ae', 'finetune'))

    def test_target_mismatch(self):
        wrong = build_bottleneck((8, 8, 8), 0.75, target_layer=0)
        with self.assertRaises(BottleneckError):
            train_ae(self.model, wrong, self.train, quick_config('ae', epochs=0))


class AssembleTestCase(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model = build_model('vgg-nano', (1, 16, 16), 4, seed=2)
        cls.images = tiny_dataset().images[:10]

    def test_identity_bottleneck_is_bitwise_equal(self):
        spec = build_bottleneck(self.model.layers[2].output_shape, 0.9, target_layer=2, identity=True)
        plan = assemble(self.model, spec)
        self.assertEqual(plan.encoded_shape, (8, 8, 8))
        np.testing.assert_array_equal(plan.compose(self.images), self.model.forward(self.images))

    def test_layers_and_payload(self):
        spec = build_bottleneck(self.model.layers[3].output_shape, 0.9, target_layer=3)
        plan = assemble(self.model, init_bottleneck(spec, 4, seed=1))
        self.assertEqual(len(plan.head.layers) + len(plan.tail.layers), len(self.model.layers) + 4)
        self.assertEqual(plan.head.layers[-1].name, 'encoder_conv2')
        self.assertEqual(plan.tail.layers[0].name, 'decoder_deconv1')
        self.assertEqual(plan.encoded_shape, spec.latent_shape)
        self.assertEqual(plan.payload_bytes, spec.encoded_elements * 4)
        self.assertEqual(plan.compose(self.images).shape, (10, 4))

    def test_untrained_spec_is_rejected(self):
        spec = build_bottleneck(self.model.layers[3].output_shape, 0.9, target_layer=3)
        with self.assertRaises(BottleneckError):
            assemble(self.model, spec)

    def test_save_and_load_artifacts(self):
        spec = build_bottleneck(self.model.layers[3].output_shape, 0.5, target_layer=3)
        plan = assemble(self.model, init_bottleneck(spec, 4, seed=3))
        with tempfile.TemporaryDirectory() as tmp:
            save_split_artifacts(plan, tmp, extra={'rate': 0.5})
            loaded, sidecar = load_split_artifacts(tmp)
        self.assertEqual(sidecar['target_layer'], 3)
        self.assertEqual(sidecar['rate'], 0.5)
        self.assertEqual(loaded.bottleneck.spec, spec)
        np.testing.assert_array_equal(loaded.compose(self.images), plan.compose(self.images))

    def test_missing_sidecar(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(BottleneckError):
            load_split_artifacts(tmp)


class ReconstructionTestCase(SimpleTestCase):
    """Com ρ=0.01 o autoencoder aproxima a identidade sobre 100 imagens fixas."""

    def test_near_complete_latent_reconstructs(self):
        model = build_model("conv(3); relu; maxpool; flatten; dense(C)", (1, 8, 8), 4, seed=0, dtype=np.float64)
        dataset = tiny_dataset(per_class=25, image_size=8)
        spec = build_bottleneck(model.layers[1].output_shape, 0.01, target_layer=1)
        self.assertGreaterEqual(spec.encoded_elements, len(dataset))
        initial = init_bottleneck(spec, model.class_count, seed=0, dtype=np.float64)
        features = head_features(model, spec, dataset.images)

        def reconstruction(bottleneck) -> float:
            return float(np.mean((bottleneck.autoencoder.forward(features) - features) ** 2))

        config = TrainConfig(phase='ae', epochs=200, lr=2e-3, batch_size=10, loss='mse_recon', seed=0)
        trained = train_ae(model, initial, dataset, config)
        self.assertEqual(len(trained.history['ae']), 200)
        self.assertLess(reconstruction(trained), 1e-3 * reconstruction(initial))
