"""
Experiências de aceitação (demoram dezenas de minutos).

Só correm com ISPLIT_ACCEPTANCE=1:
    ISPLIT_ACCEPTANCE=1 python manage.py test core.tests.test_acceptance
"""
import json
import os
import socket
import tempfile
import unittest
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.bottleneck import assemble, build_bottleneck, finetune, train_ae
from core.config import TrainConfig
from core.datasets import fine_classes, synth_dataset
from core.forms import build_experiment_config
from core.interpretability import cui_curve, gradients_baseline_curve, sanity_check
from core.network import build_model
from core.pipeline import PipelineContext, run_pipeline
from core.reporting import read_cui_csv
from core.runtime import HeadClient, parse_address, serve_tail
from core.training import accuracy
from core.wire import HEADER, ErrorCode, Frame, MsgType, decode_frame, encode_frame, recv_frame_bytes, send_frame

ENABLED = os.environ.get('ISPLIT_ACCEPTANCE') == '1'
SEEDS = (0, 1, 2)
SPATIAL_LAYERS = list(range(11))  # vgg-micro 32x32: camadas 0..10 têm mapas >= 4x4


def acceptance_config(output_dir, seed: int, **changes) -> dict:
    data = {
        'name': f'aceitacao-{seed}',
        'architecture': 'vgg-micro',
        'seed': seed,
        'dataset': {'class_count': 8, 'per_class': 100, 'image_size': 32, 'profile': 'mixed'},
        'split': {'candidates': SPATIAL_LAYERS, 'max_candidates': len(SPATIAL_LAYERS), 'rate': 0.9},
        'training': {
            'classifier': {'epochs': 15},
            'ae': {'epochs': 20},
            'finetune': {'epochs': 10, 'lr': 1e-3},
        },
        'stats': {'trials': 15, 'sample_size': 800},
        'output_dir': str(output_dir),
    }
    data.update(changes)
    return data


@unittest.skipUnless(ENABLED, 'defina ISPLIT_ACCEPTANCE=1 para correr as experiências de aceitação')
class CuiPredictsAccuracyTestCase(SimpleTestCase):
    """Pipeline completo em 3 seeds; cada seed reaproveita o mesmo diretório."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.outputs = {}
        for seed in SEEDS:
            config = build_experiment_config(acceptance_config(Path(cls._tmp.name) / f'seed_{seed}', seed))
            cls.outputs[seed] = (config, run_pipeline(config, stages=('data', 'train', 'cui', 'split',
                                                                      'retrain', 'stats'), record=False))

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def _summary(self, seed) -> dict:
        return json.loads((self.outputs[seed][1] / 'summary.json').read_text())

    def test_rank_correlation_with_retrained_accuracy(self):
        strong = [seed for seed in SEEDS if (self._summary(seed)['spearman_cui_vs_accuracy'] or 0) >= 0.6]
        self.assertGreaterEqual(len(strong), 2, [self._summary(s)['spearman_cui_vs_accuracy'] for s in SEEDS])

    def test_argmax_close_to_best_split(self):
        for seed in SEEDS:
            accuracies = {int(k): v for k, v in self._summary(seed)['split_accuracy'].items()}
            curve = read_cui_csv(self.outputs[seed][1] / 'cui.csv')
            # maior CUI entre as camadas que admitem bottleneck
            chosen = max(accuracies, key=lambda layer: curve.values[layer])
            with self.subTest(seed=seed):
                self.assertGreaterEqual(accuracies[chosen], max(accuracies.values()) - 0.02)

    def test_cde_points_are_covered(self):
        for seed in SEEDS:
            candidates = json.loads((self.outputs[seed][1] / 'candidates.json').read_text())
            with self.subTest(seed=seed):
                self.assertTrue(candidates['coverage']['all_covered'], candidates['coverage'])
                self.assertTrue(candidates['coverage']['cui_only'])

    def test_gradients_baseline_grows_with_depth(self):
        not_deepest = 0
        for seed in SEEDS:
            config, output = self.outputs[seed]
            ctx = PipelineContext.create(config, output)
            model, val = ctx.load_model(), ctx.dataset.subset('val')
            baseline = gradients_baseline_curve(model, val)
            with self.subTest(seed=seed):
                self.assertGreater(baseline.values[9], baseline.values[0])
            curve = cui_curve(model, val)
            if curve.argmax() != max(curve.layers()):
                not_deepest += 1
        self.assertGreaterEqual(not_deepest, 1)


@unittest.skipUnless(ENABLED, 'defina ISPLIT_ACCEPTANCE=1 para correr as experiências de aceitação')
class ClassDependentSplitTestCase(SimpleTestCase):
    """Subconjuntos 'fine' e 'coarse' escolhem camadas diferentes e cada um ganha na sua."""

    def _retrained_accuracy(self, model, dataset, layer: int, seed: int) -> float:
        train, val = dataset.subset('train'), dataset.subset('val')
        spec = build_bottleneck(model.layers[layer].output_shape, 0.9, layer)
        bottleneck = train_ae(model, spec, train, TrainConfig(phase='ae', epochs=20, loss='mse_recon', seed=seed))
        plan, _ = finetune(model, bottleneck, train, TrainConfig(phase='finetune', epochs=10, lr=1e-3, seed=seed))
        return accuracy(plan.predict(val.images), val.labels)

    def test_subsets_prefer_their_own_layer(self):
        wins = 0
        fine = fine_classes(8, 'mixed')
        coarse = [label for label in range(8) if label not in fine]
        with tempfile.TemporaryDirectory() as tmp:
            for seed in SEEDS:
                config = build_experiment_config(acceptance_config(
                    Path(tmp) / f'seed_{seed}', seed, cui={'class_subsets': {'fine': fine, 'coarse': coarse}},
                ))
                output = run_pipeline(config, stages=('data', 'train', 'cui'), record=False)
                subsets = json.loads((output / 'cui.json').read_text())['subsets']
                # maior CUI de cada subconjunto entre as camadas que admitem bottleneck
                own = {}
                for name in ('fine', 'coarse'):
                    curve = read_cui_csv(output / 'cui_subsets' / f'{name}.csv')
                    own[name] = max(SPATIAL_LAYERS, key=lambda layer: curve.values[layer])
                if own['fine'] == own['coarse']:
                    continue
                ctx = PipelineContext.create(config, output)
                model = ctx.load_model()
                beats = True
                for name, other in (('fine', 'coarse'), ('coarse', 'fine')):
                    part = ctx.dataset.restrict(subsets[name]['classes'])
                    at_own = self._retrained_accuracy(model, part, own[name], seed)
                    at_other = self._retrained_accuracy(model, part, own[other], seed)
                    beats = beats and at_own >= at_other
                wins += beats
        self.assertGreaterEqual(wins, 2)



@unittest.skipUnless(ENABLED, 'defina ISPLIT_ACCEPTANCE=1 para correr as experiências de aceitação')
class TrainedModelSanityTestCase(SimpleTestCase):
    """vgg-micro treinado: re-aleatorizar o que vem depois da conv mais funda muda sempre o mapa."""

    def test_deepest_conv_over_twenty_seeds(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = build_experiment_config(acceptance_config(Path(tmp), 0))
            output = run_pipeline(config, stages=('data', 'train'), record=False)
            ctx = PipelineContext.create(config, output)
            model, val = ctx.load_model(), ctx.dataset.subset('val')
        deepest = max(layer.index for layer in model.layers if layer.kind == 'conv')
        self.assertEqual(deepest, 9)
        for position in range(5):
            image = val.images[position]
            for seed in range(20):
                with self.subTest(image=position, seed=seed):
                    self.assertGreater(sanity_check(model, image, deepest, seed=seed), 0.0)


@unittest.skipUnless(ENABLED, 'defina ISPLIT_ACCEPTANCE=1 para correr as experiências de aceitação')
class SplitTransportTestCase(SimpleTestCase):
    """Inferência dividida real sobre TCP com um bottleneck treinado."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        dataset = synth_dataset(8, 25, 32, seed=3)
        cls.images = dataset.images[:100]
        model = build_model('vgg-micro', (1, 32, 32), 8, seed=3)
        spec = build_bottleneck(model.layers[5].output_shape, 0.9, target_layer=5)
        bottleneck = train_ae(model, spec, dataset, TrainConfig(phase='ae', epochs=2, loss='mse_recon', seed=3))
        cls.plan = assemble(model, bottleneck)

    def test_hundred_images_end_to_end(self):
        with serve_tail('127.0.0.1:0', self.plan.tail) as server:
            with HeadClient(self.plan.head, server.address) as client:
                for image in self.images:
                    logits, timing = client.infer(image)
                    np.testing.assert_array_equal(logits, self.plan.compose(image))
                    self.assertGreater(timing.transfer_ms, 0.0)
                    self.assertLessEqual(timing.head_ms + timing.transfer_ms + timing.tail_ms, timing.total_ms)

    def test_thousand_corrupted_and_clean_frames(self):
        latent = self.plan.head.forward(self.images[0])
        expected = self.plan.tail.forward(latent).astype(np.float32)
        rng = np.random.default_rng(0)
        with serve_tail('127.0.0.1:0', self.plan.tail) as server:
            with socket.create_connection(parse_address(server.address), timeout=10) as sock:
                for request_id in range(1, 1001):
                    raw = bytearray(encode_frame(Frame(MsgType.INFER_REQUEST, request_id, latent)))
                    corrupted = request_id % 10 == 0
                    if corrupted:
                        raw[int(rng.integers(HEADER.size, len(raw)))] ^= 1 << int(rng.integers(8))
                    send_frame(sock, bytes(raw))
                    reply = decode_frame(recv_frame_bytes(sock, 1 << 24))
                    self.assertEqual(reply.request_id, request_id)
                    if corrupted:
                        self.assertEqual(reply.error_code, ErrorCode.BAD_CRC)
                    else:
                        np.testing.assert_array_equal(reply.tensor, expected)
