"""
Ciclo de treino partilhado pelo classificador, pelo autoencoder do
bottleneck e pelo fine-tuning ponta a ponta.
"""
import logging
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .network import Model, forward_retaining

logger = logging.getLogger(__name__)

LossFn = Callable[[T.Tensor, np.ndarray], T.Tensor]


def minibatches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def classification_loss(labels: np.ndarray, loss: str) -> LossFn:
    """Perda de classificação sobre os rótulos de cada mini-lote."""
    def cross_entropy(logits: T.Tensor, batch: np.ndarray) -> T.Tensor:
        return T.softmax_cross_entropy(logits, labels[batch])

    def mse_onehot(logits: T.Tensor, batch: np.ndarray) -> T.Tensor:
        # Perda da tarefa lida literalmente: MSE entre probabilidades e one-hot
        onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[labels[batch]]
        return T.mse(T.softmax(logits), T.Tensor(onehot))

    if loss == 'cross_entropy':
        return cross_entropy
    if loss == 'mse_onehot':
        return mse_onehot
    raise ValueError(f"Perda de classificação desconhecida: {loss}")


def reconstruction_loss(targets: np.ndarray) -> LossFn:
    def mse_recon(output: T.Tensor, batch: np.ndarray) -> T.Tensor:
        return T.mse(output, T.Tensor(targets[batch]))
    return mse_recon


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float('nan')
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def fit(model: Model, inputs: np.ndarray, loss_fn: LossFn, config: TrainConfig,
        trainable: Callable[[tuple], bool] | None = None,
        evaluate: Callable[[Model], float] | None = None) -> tuple[Model, list[dict]]:
    """
    Treina os parâmetros selecionados por `trainable` (todos, por defeito).

    Devolve um novo modelo e o histórico por época; os restantes parâmetros
    ficam exatamente iguais. Com `epochs == 0` o modelo é devolvido intacto e
    o histórico vem vazio.
    """
    rng = np.random.default_rng(config.seed)
    keys = [key for key in model.param_keys() if trainable is None or trainable(key)]
    params, state, history = dict(model.params), T.AdamState(), []

    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in minibatches(len(inputs), config.batch_size, rng):
            trace = forward_retaining(model.with_params(params), inputs[batch])
            with trace.tape:
                loss = loss_fn(trace.logits, batch)
            grads = T.backward(trace.tape, loss)
            step_grads = {key: grads[trace.parameters[key]] for key in keys}
            if config.optimizer == 'adam':
                params, state = T.adam_step(params, step_grads, state, config.lr)
            else:
                params = T.sgd_step(params, step_grads, config.lr)
            losses.append(float(loss.data))
            logger.debug(f"[{config.phase}] época {epoch}, lote de {len(batch)}: perda={losses[-1]:.6f}")

        record = {'epoch': epoch, 'loss': float(np.mean(losses)) if losses else float('nan')}
        if evaluate is not None:
            record['accuracy'] = evaluate(model.with_params(params))
        history.append(record)
        logger.info(
            f"[{config.phase}] época {epoch}/{config.epochs}: perda={record['loss']:.6f}"
            + (f", acc={record['accuracy']:.4f}" if 'accuracy' in record else '')
        )
    return model.with_params(params), history


def train_classifier(model: Model, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
                     eval_images: np.ndarray | None = None,
                     eval_labels: np.ndarray | None = None) -> tuple[Model, list[dict]]:
    """Treino supervisionado do modelo completo (fase 'classifier')."""
    evaluate = None
    if eval_images is not None and len(eval_images):
        def evaluate(candidate: Model) -> float:
            return accuracy(candidate.predict(eval_images), eval_labels)
    return fit(model, images, classification_loss(labels, config.loss), config, evaluate=evaluate)
