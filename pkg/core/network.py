"""
Modelos CNN sequenciais: definição textual, execução com retenção de
ativações, divisão em sub-modelos e persistência em checkpoint binário.

Convenção de índices: as camadas são numeradas a partir de 0 sobre TODAS as
camadas (conv, relu, maxpool, flatten, dense...). Numa VGG, uma "camada
convolucional" com ativação corresponde aqui ao par conv + relu; o ponto de
divisão "após a camada i" é sempre a saída da camada de índice i.
"""
import hashlib
import json
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import (
    ArchitectureError,
    ChecksumError,
    CheckpointError,
    MagicMismatchError,
    ShapeError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ('conv', 'deconv', 'relu', 'maxpool', 'flatten', 'dense', 'softmax')
PARAM_KINDS = ('conv', 'deconv', 'dense')
SPATIAL_KINDS = ('conv', 'deconv', 'relu', 'maxpool')

PRESETS = {
    'vgg-micro': (
        "conv(8); relu; maxpool; conv(16); relu; maxpool; "
        "conv(32); relu; maxpool; conv(32); relu; maxpool; "
        "flatten; dense(64); relu; dense(C)"
    ),
    'vgg-nano': "conv(8); relu; maxpool; conv(16); relu; maxpool; flatten; dense(64); relu; dense(C)",
    'mlp-baseline': "flatten; dense(64); relu; dense(C)",
}

_DEFAULT_HYPER = {
    'conv': {'kernel': 3, 'stride': 1, 'padding': 1, 'activation': None},
    'deconv': {'kernel': 3, 'stride': 2, 'padding': 1, 'output_padding': 0, 'activation': None},
    'maxpool': {'kernel': 2, 'stride': 2},
}
_ARG_ALIASES = {'k': 'kernel', 's': 'stride', 'p': 'padding', 'op': 'output_padding', 'act': 'activation'}
_TOKEN = re.compile(r'^(?P<kind>[a-z_]+)\s*(?:\((?P<args>[^)]*)\))?$')

CHECKPOINT_MAGIC = b"ISPL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """Uma camada do modelo, com a forma de saída inferida na construção."""
    index: int
    name: str
    kind: str
    hyper: dict
    input_shape: tuple
    output_shape: tuple

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def is_spatial(self) -> bool:
        return len(self.output_shape) == 3

    def weight_shape(self) -> tuple:
        if self.kind == 'conv':
            k = self.hyper['kernel']
            return (self.hyper['out'], self.input_shape[0], k, k)
        if self.kind == 'deconv':
            k = self.hyper['kernel']
            return (self.input_shape[0], self.hyper['out'], k, k)
        if self.kind == 'dense':
            return (self.hyper['out'], self.input_shape[0])
        raise ArchitectureError(f"Camada '{self.name}' não tem parâmetros.")

    def fan_in(self) -> int:
        shape = self.weight_shape()
        if self.kind == 'dense':
            return shape[1]
        return self.input_shape[0] * shape[2] * shape[3]

    def reindexed(self, index: int) -> "LayerSpec":
        return LayerSpec(index, self.name, self.kind, dict(self.hyper), self.input_shape, self.output_shape)

    def to_dict(self) -> dict:
        return {
            'index': self.index, 'name': self.name, 'kind': self.kind, 'hyper': self.hyper,
            'input_shape': list(self.input_shape), 'output_shape': list(self.output_shape),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(
            int(data['index']), data['name'], data['kind'], dict(data['hyper']),
            tuple(data['input_shape']), tuple(data['output_shape']),
        )


def _conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_output_shape(kind: str, hyper: dict, input_shape: tuple, name: str) -> tuple:
    """Propaga a forma através de uma camada; erros citam o nome da camada."""
    def fail(message):
        raise ArchitectureError(f"Camada '{name}': {message} (entrada {tuple(input_shape)}).")

    if kind in ('conv', 'deconv', 'maxpool'):
        if len(input_shape) != 3:
            fail("esperava um mapa espacial (C,H,W)")
        _, h, w = input_shape
        k, s = hyper['kernel'], hyper['stride']
        if kind == 'maxpool':
            if h < k or w < k:
                fail(f"janela {k}x{k} excede a entrada")
            return (input_shape[0], (h - k) // s + 1, (w - k) // s + 1)
        p = hyper['padding']
        if kind == 'conv':
            if h + 2 * p < k or w + 2 * p < k:
                fail(f"kernel {k}x{k} maior que a entrada com padding {p}")
            return (hyper['out'], _conv_extent(h, k, s, p), _conv_extent(w, k, s, p))
        op_h, op_w = T.as_pair(hyper['output_padding'])
        out_h, out_w = (h - 1) * s - 2 * p + k + op_h, (w - 1) * s - 2 * p + k + op_w
        if out_h < 1 or out_w < 1:
            fail("saída vazia")
        return (hyper['out'], out_h, out_w)
    if kind in ('relu', 'softmax'):
        return tuple(input_shape)
    if kind == 'flatten':
        return (prod(input_shape),)
    if kind == 'dense':
        if len(input_shape) != 1:
            fail("dense exige entrada achatada; falta um 'flatten'")
        return (hyper['out'],)
    fail(f"tipo desconhecido '{kind}'")


def _parse_value(raw: str, class_count: int):
    raw = raw.strip()
    if raw == 'C':
        return class_count
    if raw.lstrip('-').isdigit():
        return int(raw)
    return raw


def parse_architecture(architecture: str, class_count: int) -> list[tuple[str, dict]]:
    """
    Lê a lista textual de camadas, p.ex. ``conv(8, k=3); relu; maxpool; flatten; dense(C)``.

    Separadores: ';' ou quebra de linha. O primeiro argumento posicional de
    conv/deconv/dense é o número de canais/unidades; 'C' é o número de classes.
    """
    source = PRESETS.get(architecture, architecture)
    tokens = [t.strip() for t in re.split(r'[;\n]', source or '') if t.strip()]
    if not tokens:
        raise ArchitectureError("Arquitetura vazia.")
    parsed = []
    for position, token in enumerate(tokens):
        match = _TOKEN.match(token)
        if not match or match['kind'] not in LAYER_KINDS:
            raise ArchitectureError(f"Camada {position} inválida: '{token}'.")
        kind = match['kind']
        hyper = dict(_DEFAULT_HYPER.get(kind, {}))
        args = [a for a in (match['args'] or '').split(',') if a.strip()]
        for arg in args:
            if '=' in arg:
                key, value = arg.split('=', 1)
                key = _ARG_ALIASES.get(key.strip(), key.strip())
                hyper[key] = _parse_value(value, class_count)
            else:
                hyper['out'] = _parse_value(arg, class_count)
        if kind in PARAM_KINDS and not isinstance(hyper.get('out'), int):
            raise ArchitectureError(f"Camada {position} ('{token}') precisa do número de saídas.")
        parsed.append((kind, hyper))
    return parsed


def _layer_names(parsed: list[tuple[str, dict]]) -> list[str]:
    names, block, conv_in_block, dense_count, deconv_count = [], 1, 0, 0, 0
    for position, (kind, _) in enumerate(parsed):
        if kind == 'conv':
            conv_in_block += 1
            name = f"block{block}_conv{conv_in_block}"
        elif kind == 'relu':
            previous = names[-1] if names else 'input'
            name = previous.replace('_conv', '_relu') if '_conv' in previous else f"{previous}_relu"
        elif kind == 'maxpool':
            name = f"block{block}_pool"
            block, conv_in_block = block + 1, 0
        elif kind == 'dense':
            dense_count += 1
            name = 'predictions' if position == len(parsed) - 1 else f"fc{dense_count}"
        elif kind == 'deconv':
            deconv_count += 1
            name = f"deconv{deconv_count}"
        else:
            name = kind
        while name in names:
            name = f"{name}_{position}"
        names.append(name)
    return names


def build_layers(parsed: list[tuple[str, dict]], input_shape: tuple,
                 names: list[str] | None = None, start_index: int = 0) -> list[LayerSpec]:
    names = names or _layer_names(parsed)
    layers, shape = [], tuple(input_shape)
    for offset, ((kind, hyper), name) in enumerate(zip(parsed, names)):
        out_shape = infer_output_shape(kind, hyper, shape, name)
        layers.append(LayerSpec(start_index + offset, name, kind, dict(hyper), shape, out_shape))
        shape = out_shape
    return layers


def init_params(layers: list[LayerSpec], rng: np.random.Generator, dtype=np.float32) -> dict:
    """Uniforme com limite sqrt(1/fan_in) para pesos e bias."""
    params = {}
    for layer in layers:
        if not layer.has_params:
            continue
        bound = np.sqrt(1.0 / layer.fan_in())
        weight_shape = layer.weight_shape()
        bias_len = layer.hyper['out']
        params[(layer.index, 'weight')] = rng.uniform(-bound, bound, weight_shape).astype(dtype)
        params[(layer.index, 'bias')] = rng.uniform(-bound, bound, (bias_len,)).astype(dtype)
    return params


def apply_layer(layer: LayerSpec, x: T.Tensor, params: dict, batched: bool) -> T.Tensor:
    """Executa uma camada; `params` mapeia papel ('weight'/'bias') → Tensor."""
    kind, hyper = layer.kind, layer.hyper
    if kind == 'conv':
        out = T.conv2d(x, params['weight'], params['bias'], hyper['stride'], hyper['padding'])
    elif kind == 'deconv':
        out = T.conv_transpose2d(
            x, params['weight'], params['bias'], hyper['stride'], hyper['padding'], hyper['output_padding']
        )
    elif kind == 'relu':
        return T.relu(x)
    elif kind == 'maxpool':
        return T.maxpool2d(x, hyper['kernel'], hyper['stride'])
    elif kind == 'flatten':
        return T.flatten(x, start_dim=1 if batched else 0)
    elif kind == 'dense':
        return T.dense(x, params['weight'], params['bias'])
    elif kind == 'softmax':
        return T.softmax(x)
    else:
        raise ArchitectureError(f"Tipo de camada desconhecido '{kind}'.")
    if hyper.get('activation') == 'relu':
        out = T.relu(out)
    return out


class Model:
    """
    Lista ordenada de camadas e os respetivos parâmetros.

    Os parâmetros ficam em `params`, indexados por (índice da camada, papel).
    O modelo é tratado como imutável: o treino devolve cópias (`with_params`).
    """

    def __init__(self, layers: list[LayerSpec], params: dict, input_shape, class_count: int,
                 metadata: dict | None = None):
        self.layers = list(layers)
        self.params = dict(params)
        self.input_shape = tuple(input_shape)
        self.class_count = int(class_count)
        self.metadata = dict(metadata or {})
        for position, layer in enumerate(self.layers):
            if layer.index != position:
                raise ArchitectureError(f"Índices não contíguos: camada '{layer.name}' tem índice {layer.index}.")

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        return f"Model({len(self.layers)} camadas, entrada={self.input_shape}, saída={self.output_shape})"

    @property
    def output_shape(self) -> tuple:
        return self.layers[-1].output_shape if self.layers else self.input_shape

    @property
    def dtype(self) -> np.dtype:
        for value in self.params.values():
            return value.dtype
        return np.dtype(np.float32)

    def layer_params(self, layer: LayerSpec) -> dict:
        if not layer.has_params:
            return {}
        return {role: self.params[(layer.index, role)] for role in ('weight', 'bias')}

    def param_keys(self) -> list[tuple[int, str]]:
        return sorted(self.params)

    def is_batched(self, x: np.ndarray) -> bool:
        shape = tuple(np.shape(x))
        if shape == self.input_shape:
            return False
        if shape[1:] == self.input_shape:
            return True
        raise ShapeError(f"Entrada com forma {shape} não corresponde à entrada do modelo {self.input_shape}.")

    def forward(self, x) -> np.ndarray:
        """Inferência sem fita; aceita uma imagem ou um lote."""
        batched = self.is_batched(x)
        with T.no_grad():
            out = T.Tensor(np.asarray(x, dtype=self.dtype))
            for layer in self.layers:
                weights = {role: T.Tensor(value) for role, value in self.layer_params(layer).items()}
                out = apply_layer(layer, out, weights, batched)
        return out.data

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Classe prevista para cada imagem de um lote."""
        predictions = [
            self.forward(images[start:start + batch_size]).argmax(axis=1)
            for start in range(0, len(images), batch_size)
        ]
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def with_params(self, params: dict) -> "Model":
        return Model(self.layers, params, self.input_shape, self.class_count, self.metadata)

    def astype(self, dtype) -> "Model":
        return self.with_params({key: value.astype(dtype) for key, value in self.params.items()})

    def copy(self) -> "Model":
        return self.with_params({key: value.copy() for key, value in self.params.items()})

    def slice(self, start: int, stop: int) -> "Model":
        """Sub-modelo com as camadas [start, stop), reindexadas a partir de 0."""
        if not 0 <= start < stop <= len(self.layers):
            raise ArchitectureError(f"Fatia [{start}, {stop}) inválida para {len(self.layers)} camadas.")
        layers = [layer.reindexed(i - start) for i, layer in enumerate(self.layers[start:stop], start)]
        params = {
            (index - start, role): value
            for (index, role), value in self.params.items() if start <= index < stop
        }
        return Model(layers, params, self.layers[start].input_shape, self.class_count, self.metadata)

    @staticmethod
    def concat(*models: "Model") -> "Model":
        """Encadeia modelos; a saída de cada um tem de servir de entrada ao seguinte."""
        layers, params, offset = [], {}, 0
        for position, model in enumerate(models):
            if position and models[position - 1].output_shape != model.input_shape:
                raise ArchitectureError(
                    f"Não é possível encadear {models[position - 1].output_shape} com {model.input_shape}."
                )
            layers.extend(layer.reindexed(layer.index + offset) for layer in model.layers)
            params.update({(index + offset, role): value for (index, role), value in model.params.items()})
            offset += len(model.layers)
        return Model(layers, params, models[0].input_shape, models[-1].class_count, models[0].metadata)

    def fingerprint(self) -> str:
        """SHA-256 dos parâmetros (usado para verificar congelamento)."""
        digest = hashlib.sha256()
        for key in self.param_keys():
            digest.update(repr(key).encode())
            digest.update(np.ascontiguousarray(self.params[key]).tobytes())
        return digest.hexdigest()


def build_model(architecture: str, input_shape, class_count: int, seed: int = 0, dtype=np.float32) -> Model:
    """Constrói e inicializa um modelo a partir de um preset ou lista textual."""
    parsed = parse_architecture(architecture, class_count)
    layers = build_layers(parsed, tuple(input_shape))
    params = init_params(layers, np.random.default_rng(seed), dtype)
    metadata = {'architecture': architecture if architecture in PRESETS else 'custom', 'seed': seed}
    model = Model(layers, params, input_shape, class_count, metadata)
    if model.output_shape != (class_count,):
        raise ArchitectureError(
            f"A última camada '{layers[-1].name}' produz {model.output_shape}, esperava ({class_count},)."
        )
    logger.debug(f"Modelo construído: {architecture!r}, {len(layers)} camadas, seed={seed}.")
    return model


@dataclass
class Trace:
    """Resultado de `forward_retaining`: logits, ativações por camada, fita e parâmetros."""
    logits: T.Tensor
    activations: dict
    tape: T.Tape
    parameters: dict = field(default_factory=dict)
    input: T.Tensor | None = None

    def __iter__(self):
        return iter((self.logits, self.activations, self.tape))


def forward_retaining(model: Model, image) -> Trace:
    """Forward com fita ativa, retendo a saída de cada camada."""
    batched = model.is_batched(image)
    tape = T.Tape()
    with tape:
        x = T.Tensor(np.asarray(image, dtype=model.dtype), name='input')
        tape.watch(x)
        parameters = {
            key: T.Tensor(value, name=f"{model.layers[key[0]].name}/{key[1]}", requires_grad=True)
            for key, value in model.params.items()
        }
        tape.watch(*parameters.values())
        activations, out = {}, x
        for layer in model.layers:
            weights = {role: parameters[(layer.index, role)] for role in ('weight', 'bias') if layer.has_params}
            out = apply_layer(layer, out, weights, batched)
            activations[layer.index] = out
    return Trace(out, activations, tape, parameters, x)


def layer_sizes(model: Model) -> list[int]:
    """Número de elementos da saída de cada camada."""
    return [prod(layer.output_shape) for layer in model.layers]


@dataclass
class SplitPlan:
    """Cabeça (dispositivo) e cauda (servidor) de um modelo dividido."""
    target_layer: int
    head: Model
    tail: Model
    bottleneck: object | None = None

    @property
    def encoded_shape(self) -> tuple:
        return self.head.output_shape

    @property
    def encoded_elements(self) -> int:
        return prod(self.encoded_shape)

    @property
    def payload_bytes(self) -> int:
        return self.encoded_elements * 4

    def compose(self, x) -> np.ndarray:
        return self.tail.forward(self.head.forward(x))

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        predictions = [
            self.compose(images[start:start + batch_size]).argmax(axis=1)
            for start in range(0, len(images), batch_size)
        ]
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def composite(self) -> Model:
        return Model.concat(self.head, self.tail)


def split(model: Model, target_layer: int) -> SplitPlan:
    """Divide após a camada `target_layer` (nunca após a última)."""
    if not 0 <= target_layer < len(model.layers) - 1:
        raise ArchitectureError(
            f"Ponto de divisão {target_layer} fora de [0, {len(model.layers) - 2}]."
        )
    head = model.slice(0, target_layer + 1)
    tail = model.slice(target_layer + 1, len(model.layers))
    return SplitPlan(target_layer, head, tail)


# --- Checkpoint ---

def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Valor não serializável em JSON: {value!r}")


def checkpoint_bytes(model: Model) -> bytes:
    header = {
        'layers': [layer.to_dict() for layer in model.layers],
        'input_shape': list(model.input_shape),
        'class_count': model.class_count,
        'metadata': model.metadata,
    }
    table = json.dumps(header, sort_keys=True, default=_json_default).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, struct.pack('<HI', CHECKPOINT_VERSION, len(table)), table]
    for layer in model.layers:
        for role in ('weight', 'bias'):
            if (layer.index, role) in model.params:
                chunks.append(np.ascontiguousarray(model.params[(layer.index, role)], dtype='<f4').tobytes())
    body = b''.join(chunks)
    return body + struct.pack('<I', zlib.crc32(body))


def checkpoint_save(model: Model, path) -> Path:
    """Grava o modelo no formato ISPL (parâmetros em f32 little-endian)."""
    path = Path(path)
    if model.dtype != np.float32:
        logger.warning(f"Modelo em {model.dtype} convertido para f32 ao gravar {path}.")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    logger.debug(f"Checkpoint gravado: {path} ({len(model.layers)} camadas).")
    return path


def checkpoint_from_bytes(raw: bytes, source: str = '<bytes>') -> Model:
    if len(raw) < 4 + 6 + 4:
        raise ChecksumError(f"Checkpoint truncado: {source} tem {len(raw)} bytes.")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"Magic inválido em {source}: {raw[:4]!r}.")
    version, table_len = struct.unpack_from('<HI', raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"Versão {version} não suportada em {source} (esperava {CHECKPOINT_VERSION}).")
    body, (stored_crc,) = raw[:-4], struct.unpack('<I', raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(f"CRC32 inválido em {source}: ficheiro corrompido ou truncado.")
    offset = 10
    try:
        header = json.loads(body[offset:offset + table_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Tabela de camadas ilegível em {source}: {exc}") from exc
    offset += table_len
    layers = [LayerSpec.from_dict(item) for item in header['layers']]
    params = {}
    for layer in layers:
        if not layer.has_params:
            continue
        for role, shape in (('weight', layer.weight_shape()), ('bias', (layer.hyper['out'],))):
            count = prod(shape)
            if offset + 4 * count > len(body):
                raise CheckpointError(f"Parâmetros em falta para '{layer.name}' em {source}.")
            blob = np.frombuffer(body, dtype='<f4', count=count, offset=offset)
            params[(layer.index, role)] = blob.astype(np.float32).reshape(shape)
            offset += 4 * count
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} bytes inesperados no fim de {source}.")
    return Model(layers, params, tuple(header['input_shape']), header['class_count'], header['metadata'])


def checkpoint_load(path) -> Model:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Não foi possível ler o checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(raw, str(path))
