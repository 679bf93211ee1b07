"""
Estatísticas das experiências: correlação de postos, reamostragem da
exatidão e F1 por classe antes/depois da divisão.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .datasets import Dataset
from .exceptions import DatasetError, ShapeError

logger = logging.getLogger(__name__)


def rank_correlation(xs, ys) -> float:
    """
    Spearman: Pearson sobre os postos, com empates a receber o posto médio.

    Uma das séries constante não tem ordenação; devolve 0.0 com aviso.
    """
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError(f"Séries com formas diferentes: {xs.shape} e {ys.shape}.")
    if len(xs) < 2:
        raise ShapeError(f"A correlação de postos precisa de pelo menos 2 pares; recebi {len(xs)}.")
    rx, ry = rankdata(xs) - (len(xs) + 1) / 2, rankdata(ys) - (len(ys) + 1) / 2
    denominator = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if denominator == 0:
        logger.warning("Correlação de postos com série constante: devolvo 0.0.")
        return 0.0
    return float(np.clip(np.dot(rx, ry) / denominator, -1.0, 1.0))


@dataclass(frozen=True)
class ResampleResult:
    values: tuple
    sample_size: int
    seed: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def quartiles(self) -> tuple:
        return tuple(float(q) for q in np.percentile(self.values, [25, 50, 75]))

    def to_dict(self) -> dict:
        q1, median, q3 = self.quartiles
        return {
            'trials': len(self.values), 'sample_size': self.sample_size, 'seed': self.seed,
            'mean': self.mean, 'q1': q1, 'median': median, 'q3': q3,
            'min': float(min(self.values)), 'max': float(max(self.values)),
            'values': list(self.values),
        }


def stats_resample(predictor, dataset: Dataset, sample_size: int | None = None,
                   trials: int = 15, seed: int = 0) -> ResampleResult:
    """
    Exatidão em `trials` amostras sem reposição do conjunto de validação.

    `predictor` é um Model ou um SplitPlan (qualquer objeto com `predict`).
    As previsões são calculadas uma vez; cada ensaio só sorteia índices.
    """
    if len(dataset) == 0:
        raise DatasetError("Reamostragem sobre um conjunto vazio.")
    if trials < 1:
        raise ValueError(f"trials={trials}: é preciso pelo menos um ensaio.")
    size = min(800, len(dataset)) if sample_size is None else sample_size
    if size > len(dataset):
        logger.warning(f"sample_size={size} excede as {len(dataset)} imagens; uso {len(dataset)}.")
        size = len(dataset)
    correct = np.asarray(predictor.predict(dataset.images)) == dataset.labels
    rng = np.random.default_rng(seed)
    values = tuple(
        float(correct[rng.choice(len(dataset), size=size, replace=False)].mean()) for _ in range(trials)
    )
    result = ResampleResult(values, size, seed)
    logger.info(f"Reamostragem: {trials} ensaios de {size} imagens, média={result.mean:.4f}.")
    return result


def f1_scores(predictions: np.ndarray, labels: np.ndarray, class_count: int) -> list[float | None]:
    """F1 por classe; None quando a classe não aparece no conjunto."""
    scores = []
    for label in range(class_count):
        support = int(np.sum(labels == label))
        if support == 0:
            scores.append(None)
            continue
        tp = int(np.sum((predictions == label) & (labels == label)))
        fp = int(np.sum((predictions == label) & (labels != label)))
        fn = support - tp
        scores.append(2 * tp / (2 * tp + fp + fn))
    return scores


@dataclass(frozen=True)
class F1Report:
    rows: list
    rho: float | None

    def columns(self) -> tuple[list, list]:
        return [row['f1_before'] for row in self.rows], [row['f1_after'] for row in self.rows]


def per_class_f1_report(model, split_model, dataset: Dataset) -> F1Report:
    """
    F1 por classe do modelo inteiro e do dividido, ordenado pelo F1 antes
    da divisão (decrescente; classes sem F1 no fim).
    """
    before = f1_scores(np.asarray(model.predict(dataset.images)), dataset.labels, dataset.class_count)
    after = f1_scores(np.asarray(split_model.predict(dataset.images)), dataset.labels, dataset.class_count)
    missing = [label for label, value in enumerate(before) if value is None]
    if missing:
        logger.warning(f"Classes ausentes do conjunto de teste (F1 indefinido): {missing}.")

    order = sorted(range(dataset.class_count),
                   key=lambda label: (before[label] is None, -(before[label] or 0.0), label))
    rows = [
        {'rank': rank, 'class': label, 'support': int(np.sum(dataset.labels == label)),
         'f1_before': before[label], 'f1_after': after[label]}
        for rank, label in enumerate(order, start=1)
    ]
    defined = [(before[label], after[label]) for label in order if before[label] is not None]
    rho = rank_correlation(*zip(*defined)) if len(defined) >= 2 else None
    return F1Report(rows, rho)
