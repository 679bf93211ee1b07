"""
Grad-CAM por camada, curvas CUI (importância acumulada) e seleção de
pontos de divisão.

Convenções adotadas:
  - y^c é o logit (antes do softmax) da classe verdadeira da imagem;
  - α_k é a média espacial (divide por n·m) do gradiente no canal k;
  - o mapa de uma camada soma apenas os canais dessa camada;
  - os mapas nunca são reamostrados para a resolução da entrada.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .exceptions import DatasetError, ShapeError, UnsupportedLayerError
from .network import Model, forward_retaining, init_params

logger = logging.getLogger(__name__)

METHODS = ('gradcam', 'gradients')
REDUCTIONS = ('sum', 'mean')


@dataclass(frozen=True)
class AlphaVector:
    """Coeficiente de importância por canal da camada `layer` para a classe."""
    layer: int
    class_index: int
    values: np.ndarray


@dataclass(frozen=True)
class ImportanceMap:
    """Mapa de ativação de classe (n × m, não negativo) de uma camada."""
    layer: int
    class_index: int
    image_id: int
    map: np.ndarray


@dataclass
class CuiCurve:
    """Valor CUI por índice de camada, com âmbito e proveniência."""
    values: dict
    layer_names: dict
    scope: str
    reduction: str
    method: str = 'gradcam'
    provenance: dict = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted(self.values)

    def as_array(self) -> np.ndarray:
        return np.array([self.values[layer] for layer in self.layers()], dtype=np.float64)

    def argmax(self) -> int:
        return select_split_points(self)[0]


def cui_layers(model: Model) -> list[int]:
    """Camadas com mapa espacial (conv, relu, maxpool...); são as avaliadas pela CUI."""
    return [layer.index for layer in model.layers if layer.is_spatial]


def _check_layer(model: Model, layer: int) -> None:
    if not 0 <= layer < len(model.layers):
        raise UnsupportedLayerError(f"Camada {layer} não existe (o modelo tem {len(model.layers)}).")
    spec = model.layers[layer]
    if not spec.is_spatial:
        raise UnsupportedLayerError(
            f"Camada '{spec.name}' ({spec.kind}, saída {spec.output_shape}) não tem mapa espacial."
        )


def _check_class(model: Model, class_index: int) -> None:
    if not 0 <= class_index < model.class_count:
        raise ShapeError(f"Classe {class_index} fora de [0, {model.class_count}).")


def _layer_gradients(model: Model, images: np.ndarray, classes: np.ndarray, layers: list[int]) -> dict:
    """
    Um forward e um backward por lote: devolve (F, ∂y^c/∂F) de cada camada.

    A pontuação retropropagada é Σ_j y^{c_j}(imagem j); como cada logit só
    depende da própria imagem, o gradiente por imagem não se mistura.
    """
    trace = forward_retaining(model, images)
    with trace.tape:
        score = T.sum(T.take(trace.logits, classes))
    grads = T.backward(trace.tape, score)
    return {layer: (trace.activations[layer].data, grads[trace.activations[layer]]) for layer in layers}


def _alphas(gradient: np.ndarray) -> np.ndarray:
    return gradient.mean(axis=(-2, -1))


def _maps(features: np.ndarray, gradient: np.ndarray, method: str) -> np.ndarray:
    """Mapas (N, n, m) a partir de F e ∂y/∂F em lote (N, z, n, m)."""
    alpha = _alphas(gradient)
    if method == 'gradcam':
        weighted = np.einsum('nz,nzhw->nhw', alpha, features)
    elif method == 'gradients':
        # Sem o fator F: o mapa é constante e igual a Σ_k α_k em cada posição
        weighted = np.broadcast_to(alpha.sum(axis=1)[:, None, None], (len(alpha),) + features.shape[-2:]).copy()
    else:
        raise ValueError(f"Método desconhecido '{method}'; use um de {METHODS}.")
    return np.maximum(weighted, 0)


def gradcam_alpha(model: Model, image: np.ndarray, class_index: int, layer: int) -> AlphaVector:
    _check_layer(model, layer)
    _check_class(model, class_index)
    _, gradient = _layer_gradients(model, np.asarray(image)[None], np.array([class_index]), [layer])[layer]
    return AlphaVector(layer, class_index, _alphas(gradient)[0])


def gradcam_map(model: Model, image: np.ndarray, class_index: int, layer: int,
                image_id: int = 0, method: str = 'gradcam') -> ImportanceMap:
    _check_layer(model, layer)
    _check_class(model, class_index)
    features, gradient = _layer_gradients(model, np.asarray(image)[None], np.array([class_index]), [layer])[layer]
    return ImportanceMap(layer, class_index, image_id, _maps(features, gradient, method)[0])


def per_image_cui(importance: ImportanceMap | np.ndarray, reduction: str = 'sum') -> float:
    """Soma (por defeito) ou média dos elementos do mapa."""
    values = importance.map if isinstance(importance, ImportanceMap) else np.asarray(importance)
    if reduction == 'sum':
        return float(np.sum(values, dtype=np.float64))
    if reduction == 'mean':
        return float(np.mean(values, dtype=np.float64))
    raise ValueError(f"Redução desconhecida '{reduction}'; use um de {REDUCTIONS}.")


def _chunk_scores(model: Model, images: np.ndarray, labels: np.ndarray, layers: list[int],
                  reduction: str, method: str) -> np.ndarray:
    gradients = _layer_gradients(model, images, labels, layers)
    scores = np.empty((len(images), len(layers)), dtype=np.float64)
    for column, layer in enumerate(layers):
        maps = _maps(*gradients[layer], method).reshape(len(images), -1)
        if reduction == 'sum':
            scores[:, column] = maps.sum(axis=1, dtype=np.float64)
        else:
            scores[:, column] = maps.mean(axis=1, dtype=np.float64)
    return scores


def per_image_scores(model: Model, images: np.ndarray, labels: np.ndarray, layers: list[int],
                     reduction: str = 'sum', method: str = 'gradcam', parallelism: int = 1,
                     chunk_size: int = 16) -> np.ndarray:
    """
    Matriz (imagens × camadas) de CUI por imagem.

    Os blocos têm tamanho fixo e são definidos pela ordem das imagens, por
    isso o resultado é bit a bit igual para qualquer grau de paralelismo.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"Redução desconhecida '{reduction}'; use um de {REDUCTIONS}.")
    for layer in layers:
        _check_layer(model, layer)
    chunks = [slice(start, start + chunk_size) for start in range(0, len(images), chunk_size)]

    def work(chunk: slice) -> np.ndarray:
        return _chunk_scores(model, images[chunk], labels[chunk], layers, reduction, method)

    if parallelism <= 1 or len(chunks) <= 1:
        results = [work(chunk) for chunk in chunks]
    else:
        # Cada thread tem a sua própria fita; o modelo é só de leitura
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, chunks))
    return np.concatenate(results, axis=0)


def _aggregate(scores: np.ndarray, labels: np.ndarray, class_balanced: bool) -> np.ndarray:
    if not class_balanced:
        return scores.mean(axis=0)
    class_means = [scores[labels == label].mean(axis=0) for label in np.unique(labels)]
    return np.mean(class_means, axis=0)


def _curve(model: Model, layers: list[int], values: np.ndarray, scope: str, reduction: str,
           method: str, provenance: dict) -> CuiCurve:
    return CuiCurve(
        values={layer: float(value) for layer, value in zip(layers, values)},
        layer_names={layer: model.layers[layer].name for layer in layers},
        scope=scope, reduction=reduction, method=method, provenance=provenance,
    )


def cui_curve(model: Model, dataset: Dataset, class_subset=None, reduction: str = 'sum',
              parallelism: int = 1, method: str = 'gradcam', class_balanced: bool = False,
              layers: list[int] | None = None, chunk_size: int = 16) -> CuiCurve:
    """
    Curva CUI: média sobre as imagens (da classe verdadeira de cada uma)
    do CUI por imagem em cada camada espacial.

    Com `class_balanced` cada classe contribui igualmente (média das médias
    por classe), útil em conjuntos desbalanceados.
    """
    scope_data = dataset if class_subset is None else dataset.restrict(class_subset)
    if len(scope_data) == 0:
        raise DatasetError(f"Nenhuma imagem para o subconjunto de classes {class_subset}.")
    layers = layers if layers is not None else cui_layers(model)
    logger.info(
        f"CUI ({method}, {reduction}) em {len(scope_data)} imagens, {len(layers)} camadas, "
        f"paralelismo={parallelism}."
    )
    scores = per_image_scores(model, scope_data.images, scope_data.labels, layers,
                              reduction, method, parallelism, chunk_size)
    classes = sorted(set(int(c) for c in scope_data.labels))
    scope = 'class' if len(classes) == 1 else 'general'
    provenance = {
        'dataset': dataset.name, 'classes': classes, 'images': len(scope_data),
        'class_balanced': class_balanced,
    }
    return _curve(model, layers, _aggregate(scores, scope_data.labels, class_balanced),
                  scope, reduction, method, provenance)


def per_class_curves(model: Model, dataset: Dataset, reduction: str = 'sum', parallelism: int = 1,
                     method: str = 'gradcam', layers: list[int] | None = None,
                     chunk_size: int = 16) -> dict[int, CuiCurve]:
    """Curvas por classe a partir de uma única passagem sobre o conjunto."""
    if len(dataset) == 0:
        raise DatasetError("Conjunto vazio: não há curvas por classe.")
    layers = layers if layers is not None else cui_layers(model)
    scores = per_image_scores(model, dataset.images, dataset.labels, layers,
                              reduction, method, parallelism, chunk_size)
    curves = {}
    for label in sorted(set(int(c) for c in dataset.labels)):
        members = dataset.labels == label
        provenance = {'dataset': dataset.name, 'classes': [label], 'images': int(members.sum()),
                      'class_balanced': False}
        curves[label] = _curve(model, layers, scores[members].mean(axis=0), 'class',
                               reduction, method, provenance)
    return curves


def per_image_curve(model: Model, image: np.ndarray, class_index: int, reduction: str = 'sum',
                    method: str = 'gradcam', image_id: int = 0) -> CuiCurve:
    layers = cui_layers(model)
    scores = _chunk_scores(model, np.asarray(image)[None], np.array([class_index]), layers, reduction, method)
    provenance = {'image_id': image_id, 'classes': [class_index], 'images': 1, 'class_balanced': False}
    return _curve(model, layers, scores[0], 'image', reduction, method, provenance)


def gradients_baseline_curve(model: Model, dataset: Dataset, **kwargs) -> CuiCurve:
    """O mesmo pipeline sem multiplicar pelos mapas de características."""
    return cui_curve(model, dataset, method='gradients', **kwargs)


def select_split_points(curve: CuiCurve) -> list[int]:
    """
    Máximos locais estritos da curva, ordenados por CUI decrescente.

    Num patamar que é máximo local escolhe-se o elemento mais profundo; as
    extremidades contam quando superam o único vizinho. O primeiro elemento
    devolvido é o máximo global.
    """
    layers = curve.layers()
    values = [curve.values[layer] for layer in layers]
    candidates, start = [], 0
    while start < len(values):
        end = start
        while end + 1 < len(values) and values[end + 1] == values[start]:
            end += 1
        rises = start == 0 or values[start - 1] < values[start]
        falls = end == len(values) - 1 or values[end + 1] < values[start]
        if rises and falls:
            candidates.append(end)
        start = end + 1
    ranked = sorted(candidates, key=lambda position: (-values[position], -position))
    return [layers[position] for position in ranked]


def cde_candidates(sizes: list[int]) -> list[int]:
    """Índices i com size(i+1) < size(i): dividir após a camada i."""
    return [i for i in range(len(sizes) - 1) if sizes[i + 1] < sizes[i]]


def candidate_coverage(cde: list[int], curve: CuiCurve) -> dict:
    """
    Compara candidatos CDE com a curva CUI.

    Um ponto CDE está coberto quando é candidato CUI ou vizinho imediato
    (na ordem da curva) de um candidato CUI.
    """
    layers = curve.layers()
    cui = select_split_points(curve)
    positions = {layer: position for position, layer in enumerate(layers)}
    near = set()
    for layer in cui:
        position = positions[layer]
        near.update(layers[max(0, position - 1):position + 2])
    covered = [layer for layer in cde if layer in near]
    return {
        'cde': list(cde),
        'cui': cui,
        'covered': covered,
        'all_covered': len(covered) == len(cde),
        'cui_only': [layer for layer in cui if layer not in cde],
    }


def randomize_deeper_layers(model: Model, layer: int, seed: int) -> Model:
    """Cópia do modelo com os parâmetros das camadas após `layer` reinicializados."""
    deeper = [spec for spec in model.layers if spec.index > layer]
    fresh = init_params(deeper, np.random.default_rng(seed), model.dtype)
    return model.with_params({**model.params, **fresh})


def sanity_check(model: Model, image: np.ndarray, layer: int, seed: int | None,
                 class_index: int | None = None) -> float:
    """
    Diferença absoluta média entre o mapa do modelo treinado e o de uma cópia
    com as camadas mais profundas re-aleatorizadas (`seed=None` usa uma cópia
    exata, o que dá divergência 0).
    """
    if class_index is None:
        class_index = int(model.forward(image).argmax())
    trained = gradcam_map(model, image, class_index, layer).map
    other = model.copy() if seed is None else randomize_deeper_layers(model, layer, seed)
    randomized = gradcam_map(other, image, class_index, layer).map
    divergence = float(np.mean(np.abs(trained.astype(np.float64) - randomized.astype(np.float64))))
    logger.debug(f"Sanity check na camada {layer} (seed={seed}): divergência={divergence:.6g}.")
    return divergence
