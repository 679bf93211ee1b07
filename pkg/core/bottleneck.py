"""
Bottleneck (autoencoder sub-completo) no ponto de divisão: construção,
treino em duas fases e montagem do modelo dividido.

Fases:
  1. `train_ae`: só o encoder/decoder aprende a reconstruir a ativação da
     camada alvo; o resto da rede fica congelado;
  2. `finetune`: ajuste ponta a ponta de toda a rede com a perda da tarefa.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .datasets import Dataset
from .exceptions import BottleneckError, PhaseOrderError
from .network import (
    Model,
    SplitPlan,
    build_layers,
    checkpoint_load,
    checkpoint_save,
    init_params,
    split,
)
from .training import accuracy, classification_loss, fit, reconstruction_loss

logger = logging.getLogger(__name__)

ENCODER_NAMES = ['encoder_conv1', 'encoder_conv2']
DECODER_NAMES = ['decoder_deconv1', 'decoder_deconv2']
SIDECAR_NAME = 'split.json'


def _halved(size: int) -> int:
    # conv k3 s2 p1: (size - 1) // 2 + 1 == ceil(size / 2)
    return (size - 1) // 2 + 1


@dataclass(frozen=True)
class BottleneckSpec:
    """Arquitetura do autoencoder para a saída (z, n, m) da camada alvo."""
    target_layer: int
    input_shape: tuple
    rate: float
    latent_channels: int
    budget_exceeded: bool = False
    identity: bool = False

    @property
    def hidden_channels(self) -> int:
        """max(z, ceil(latentes / 2)): com ρ pequeno a camada escondida não fica mais estreita que o latente."""
        return max(self.input_shape[0], math.ceil(self.latent_channels / 2))

    @property
    def hidden_shape(self) -> tuple:
        _, n, m = self.input_shape
        return (self.hidden_channels, _halved(n), _halved(m))

    @property
    def latent_shape(self) -> tuple:
        if self.identity:
            return self.input_shape
        _, n1, m1 = self.hidden_shape
        return (self.latent_channels, _halved(n1), _halved(m1))

    @property
    def input_elements(self) -> int:
        return math.prod(self.input_shape)

    @property
    def encoded_elements(self) -> int:
        return math.prod(self.latent_shape)

    @property
    def budget(self) -> int:
        """ceil((1 − ρ)·z·n·m), o limite de elementos codificados."""
        return math.ceil((1 - Fraction(repr(self.rate))) * self.input_elements)

    def encoder_layers(self) -> list[tuple[str, dict]]:
        return [
            ('conv', {'out': self.hidden_channels, 'kernel': 3, 'stride': 2, 'padding': 1, 'activation': 'relu'}),
            ('conv', {'out': self.latent_channels, 'kernel': 3, 'stride': 2, 'padding': 1, 'activation': None}),
        ]

    def decoder_layers(self) -> list[tuple[str, dict]]:
        """Duas deconv k3 s2 p1; o output_padding (por eixo) repõe exatamente n1 e depois n."""
        z, n, m = self.input_shape
        hidden, n1, m1 = self.hidden_shape
        _, n2, m2 = self.latent_shape
        first = [n1 - (2 * n2 - 1), m1 - (2 * m2 - 1)]
        second = [n - (2 * n1 - 1), m - (2 * m1 - 1)]
        return [
            ('deconv', {'out': hidden, 'kernel': 3, 'stride': 2, 'padding': 1,
                        'output_padding': first, 'activation': 'relu'}),
            ('deconv', {'out': z, 'kernel': 3, 'stride': 2, 'padding': 1,
                        'output_padding': second, 'activation': None}),
        ]

    def to_dict(self) -> dict:
        data = asdict(self)
        data['input_shape'] = list(self.input_shape)
        data['latent_shape'] = list(self.latent_shape)
        data['encoded_elements'] = self.encoded_elements
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "BottleneckSpec":
        return cls(
            int(data['target_layer']), tuple(data['input_shape']), float(data['rate']),
            int(data['latent_channels']), bool(data.get('budget_exceeded', False)),
            bool(data.get('identity', False)),
        )


def build_bottleneck(input_shape, rate: float, target_layer: int = -1,
                     identity: bool = False) -> BottleneckSpec:
    """
    Calcula o autoencoder para uma ativação (z, n, m) e uma taxa ρ.

    latent_channels = max(1, floor((1 − ρ)·z·n·m / (ceil(n/4)·ceil(m/4)))).
    Quando o orçamento nem chega a um canal o valor é fixado em 1 e
    `budget_exceeded` fica a True.
    """
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise BottleneckError(f"O bottleneck precisa de um mapa (z, n, m); recebi {input_shape}.")
    z, n, m = input_shape
    if n < 4 or m < 4:
        raise BottleneckError(f"Mapa {n}x{m} pequeno demais para duas reduções de stride 2 (mínimo 4x4).")
    if not 0.0 < rate < 1.0:
        raise BottleneckError(f"Taxa de compressão {rate} fora de (0, 1).")
    if identity:
        logger.warning(f"Bottleneck identidade na camada {target_layer}: sem compressão (modo debug).")
        return BottleneckSpec(target_layer, input_shape, rate, z, identity=True)

    latent_spatial = math.ceil(n / 4) * math.ceil(m / 4)
    budget = (1 - Fraction(repr(rate))) * z * n * m
    channels = math.floor(budget / latent_spatial)
    exceeded = channels < 1
    if exceeded:
        logger.warning(
            f"Orçamento de {float(budget):.1f} elementos não chega a um canal latente "
            f"({latent_spatial} posições); latent_channels fixado em 1."
        )
    spec = BottleneckSpec(target_layer, input_shape, rate, max(1, channels), exceeded)
    logger.info(
        f"Bottleneck na camada {target_layer}: {input_shape} -> {spec.latent_shape} "
        f"({spec.encoded_elements}/{spec.input_elements} elementos, ρ={rate})."
    )
    return spec


@dataclass
class TrainedBottleneck:
    """Especificação, encoder/decoder (como modelos) e fases já concluídas."""
    spec: BottleneckSpec
    encoder: Model | None
    decoder: Model | None
    phases: tuple = ()
    history: dict = field(default_factory=dict)

    @property
    def autoencoder(self) -> Model:
        return Model.concat(self.encoder, self.decoder)


def init_bottleneck(spec: BottleneckSpec, class_count: int, seed: int = 0, dtype=np.float32) -> TrainedBottleneck:
    if spec.identity:
        return TrainedBottleneck(spec, None, None)
    rng = np.random.default_rng(seed)
    encoder_layers = build_layers(spec.encoder_layers(), spec.input_shape, names=ENCODER_NAMES)
    decoder_layers = build_layers(spec.decoder_layers(), spec.latent_shape, names=DECODER_NAMES)
    if decoder_layers[-1].output_shape != spec.input_shape:
        raise BottleneckError(
            f"O decoder produz {decoder_layers[-1].output_shape}, esperava {spec.input_shape}."
        )
    metadata = {'bottleneck': spec.to_dict()}
    encoder = Model(encoder_layers, init_params(encoder_layers, rng, dtype), spec.input_shape, class_count, metadata)
    decoder = Model(decoder_layers, init_params(decoder_layers, rng, dtype), spec.latent_shape, class_count, metadata)
    return TrainedBottleneck(spec, encoder, decoder)


def _check_target(model: Model, spec: BottleneckSpec) -> None:
    if not 0 <= spec.target_layer < len(model.layers) - 1:
        raise BottleneckError(f"Camada alvo {spec.target_layer} inválida para {len(model.layers)} camadas.")
    produced = model.layers[spec.target_layer].output_shape
    if produced != spec.input_shape:
        raise BottleneckError(
            f"O bottleneck espera {spec.input_shape}, mas a camada "
            f"'{model.layers[spec.target_layer].name}' produz {produced}."
        )


def head_features(model: Model, spec: BottleneckSpec, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Φ_T(I): saída da camada alvo para cada imagem (sem fita)."""
    head = model.slice(0, spec.target_layer + 1)
    chunks = [head.forward(images[start:start + batch_size]) for start in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0,) + spec.input_shape, dtype=model.dtype)


def train_ae(model: Model, spec: BottleneckSpec | TrainedBottleneck, dataset: Dataset,
             config: TrainConfig) -> TrainedBottleneck:
    """
    Treina apenas o encoder/decoder a reconstruir Φ_T(I) (MSE).

    O modelo recebido não é alterado: as ativações alvo são calculadas
    uma vez e servem de entrada e de alvo.
    """
    bottleneck = spec if isinstance(spec, TrainedBottleneck) else init_bottleneck(
        spec, model.class_count, config.seed, model.dtype
    )
    spec = bottleneck.spec
    _check_target(model, spec)
    if spec.identity:
        logger.info("Bottleneck identidade: fase 'ae' sem parâmetros a treinar.")
        return replace(bottleneck, phases=bottleneck.phases + ('ae',), history={**bottleneck.history, 'ae': []})

    features = head_features(model, spec, dataset.images)
    logger.info(
        f"Fase 'ae' na camada {spec.target_layer}: {len(features)} ativações {spec.input_shape}, "
        f"{config.epochs} épocas, lr={config.lr}."
    )
    trained, history = fit(bottleneck.autoencoder, features, reconstruction_loss(features), config)
    return TrainedBottleneck(
        spec, trained.slice(0, 2), trained.slice(2, 4),
        bottleneck.phases + ('ae',), {**bottleneck.history, 'ae': history},
    )


def _composite(model: Model, bottleneck: TrainedBottleneck) -> Model:
    target = bottleneck.spec.target_layer
    head, tail = model.slice(0, target + 1), model.slice(target + 1, len(model.layers))
    if bottleneck.spec.identity:
        return Model.concat(head, tail)
    return Model.concat(head, bottleneck.encoder, bottleneck.decoder, tail)


def _plan_from_composite(composite: Model, bottleneck: TrainedBottleneck) -> SplitPlan:
    target = bottleneck.spec.target_layer
    cut = target + 1 if bottleneck.spec.identity else target + 3
    head, tail = composite.slice(0, cut), composite.slice(cut, len(composite.layers))
    return SplitPlan(target, head, tail, bottleneck)


def finetune(model: Model, bottleneck: TrainedBottleneck, dataset: Dataset, config: TrainConfig,
             eval_dataset: Dataset | None = None,
             allow_phase_override: bool = False) -> tuple[SplitPlan, list[dict]]:
    """
    Ajuste ponta a ponta de W_M e W_AE com a perda da tarefa.

    Exige a fase 'ae' concluída, salvo `allow_phase_override`. Devolve o
    plano dividido pronto a implantar e o histórico (perda e exatidão).
    """
    if 'ae' not in bottleneck.phases:
        if not allow_phase_override:
            raise PhaseOrderError("O fine-tuning exige o bottleneck pré-treinado (fase 'ae').")
        logger.warning("Fine-tuning sem fase 'ae' (ordem das fases ignorada a pedido).")
    _check_target(model, bottleneck.spec)

    evaluation = eval_dataset if eval_dataset is not None else dataset

    def evaluate(candidate: Model) -> float:
        return accuracy(candidate.predict(evaluation.images), evaluation.labels)

    composite = _composite(model, bottleneck)
    logger.info(
        f"Fase 'finetune' na camada {bottleneck.spec.target_layer}: {len(dataset)} imagens, "
        f"{config.epochs} épocas, lr={config.lr}, perda={config.loss}."
    )
    tuned, history = fit(composite, dataset.images, classification_loss(dataset.labels, config.loss),
                         config, evaluate=evaluate)
    plan = _plan_from_composite(tuned, bottleneck)
    target = bottleneck.spec.target_layer
    if not bottleneck.spec.identity:
        encoder, decoder = tuned.slice(target + 1, target + 3), tuned.slice(target + 3, target + 5)
    else:
        encoder = decoder = None
    plan.bottleneck = TrainedBottleneck(
        bottleneck.spec, encoder, decoder,
        bottleneck.phases + ('finetune',), {**bottleneck.history, 'finetune': history},
    )
    return plan, history


def assemble(model: Model, bottleneck: TrainedBottleneck | BottleneckSpec) -> SplitPlan:
    """Cabeça = camadas [0..T] + encoder; cauda = decoder + camadas [T+1..]."""
    if isinstance(bottleneck, BottleneckSpec):
        if not bottleneck.identity:
            raise BottleneckError("assemble precisa de um bottleneck com parâmetros (use init_bottleneck).")
        bottleneck = TrainedBottleneck(bottleneck, None, None)
    _check_target(model, bottleneck.spec)
    if bottleneck.spec.identity:
        plan = split(model, bottleneck.spec.target_layer)
        plan.bottleneck = bottleneck
        return plan
    plan = _plan_from_composite(_composite(model, bottleneck), bottleneck)
    if plan.encoded_elements != bottleneck.spec.encoded_elements:
        raise BottleneckError(
            f"A cabeça produz {plan.encoded_elements} elementos, esperava {bottleneck.spec.encoded_elements}."
        )
    return plan


def save_split_artifacts(plan: SplitPlan, directory, extra: dict | None = None) -> Path:
    """Grava head.ispl, tail.ispl e o sidecar JSON com camada, ρ, latente e histórico."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checkpoint_save(plan.head, directory / 'head.ispl')
    checkpoint_save(plan.tail, directory / 'tail.ispl')
    bottleneck = plan.bottleneck
    sidecar = {
        'target_layer': plan.target_layer,
        'encoded_shape': list(plan.encoded_shape),
        'encoded_elements': plan.encoded_elements,
        'payload_bytes': plan.payload_bytes,
        'bottleneck': bottleneck.spec.to_dict() if bottleneck is not None else None,
        'phases': list(bottleneck.phases) if bottleneck is not None else [],
        'history': bottleneck.history if bottleneck is not None else {},
        **(extra or {}),
    }
    (directory / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Artefactos da divisão na camada {plan.target_layer} gravados em {directory}.")
    return directory


def load_split_artifacts(directory) -> tuple[SplitPlan, dict]:
    directory = Path(directory)
    try:
        sidecar = json.loads((directory / SIDECAR_NAME).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as exc:
        raise BottleneckError(f"Sidecar ilegível em {directory}: {exc}") from exc
    head, tail = checkpoint_load(directory / 'head.ispl'), checkpoint_load(directory / 'tail.ispl')
    spec = BottleneckSpec.from_dict(sidecar['bottleneck']) if sidecar.get('bottleneck') else None
    bottleneck = TrainedBottleneck(spec, None, None, tuple(sidecar.get('phases', ())),
                                   sidecar.get('history', {})) if spec else None
    return SplitPlan(int(sidecar['target_layer']), head, tail, bottleneck), sidecar
