"""Utilitários partilhados pelos testes (modelos e conjuntos pequenos)."""
import numpy as np

from core import tensor as T
from core.config import TrainConfig
from core.datasets import assign_splits, synth_dataset
from core.network import build_model

TOY_CNN = "conv(3); relu; maxpool; flatten; dense(C)"


def toy_model(seed: int = 0, dtype=np.float64, input_shape=(2, 6, 6), class_count: int = 4,
              architecture: str = TOY_CNN):
    return build_model(architecture, input_shape, class_count, seed=seed, dtype=dtype)


def tiny_dataset(class_count: int = 4, per_class: int = 12, image_size: int = 16,
                 profile: str = 'mixed', seed: int = 0):
    return assign_splits(synth_dataset(class_count, per_class, image_size, profile, seed=seed), seed=seed)


def quick_config(phase: str, epochs: int = 2, lr: float = 5e-3, **changes) -> TrainConfig:
    loss = 'mse_recon' if phase == 'ae' else 'cross_entropy'
    return TrainConfig(phase=phase, epochs=epochs, lr=lr, loss=loss, batch_size=8, **changes)


def loss_of(model, image, label) -> float:
    """Entropia cruzada calculada sem fita (para diferenças finitas)."""
    with T.no_grad():
        return T.softmax_cross_entropy(T.Tensor(model.forward(image)), label).item()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(f, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Diferenças centrais elemento a elemento; `f` lê `array` (alterado no lugar)."""
    grad = np.zeros_like(array)
    flat, grad_flat = array.reshape(-1), grad.reshape(-1)
    for position in range(flat.size):
        original = flat[position]
        flat[position] = original + step
        upper = f()
        flat[position] = original - step
        lower = f()
        flat[position] = original
        grad_flat[position] = (upper - lower) / (2 * step)
    return grad
