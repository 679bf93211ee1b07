"""
Motor de tensores densos com diferenciação automática em modo reverso.

As operações são funções de módulo que recebem `Tensor`s e, quando existe
uma `Tape` ativa na thread corrente, registam um nó com a função de
retropropagação correspondente. Todas as operações espaciais aceitam uma
dimensão de lote opcional à frente (N), que é uma extensão explícita e não
broadcasting.
"""
import itertools
import logging
import threading
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DetachedTensorError, NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_ids = itertools.count(1)
_local = threading.local()
_debug_numerics = False

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_debug_numerics(enabled: bool) -> None:
    """Ativa a verificação de NaN/Inf após cada operação (modo debug)."""
    global _debug_numerics
    _debug_numerics = bool(enabled)


class Tensor:
    """
    Array numérico denso (f32 ou f64) com identificador único.

    O identificador é o que a `Tape` e o `GradientSet` usam como chave.
    """
    __slots__ = ('id', 'data', 'name', 'requires_grad')

    def __init__(self, data, *, name: str = "", requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        self.id = next(_ids)
        self.data = array
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    """Uma operação primitiva registada na fita."""
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """
    Registo topologicamente ordenado das operações de uma passagem forward.

    Uma fita pertence a uma única thread; é ativada com `with Tape() as tape:`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tensors: dict[int, Tensor] = {}

    def watch(self, *tensors: Tensor) -> None:
        """Regista tensores folha (parâmetros, entradas) na fita."""
        for tensor in tensors:
            self._tensors.setdefault(tensor.id, tensor)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.watch(*inputs)
        self._tensors[output.id] = output
        self.nodes.append(Node(op, tuple(t.id for t in inputs), output.id, backward))

    def tensor(self, tensor_id: int) -> Tensor:
        return self._tensors[tensor_id]

    def tensor_ids(self) -> list[int]:
        return list(self._tensors)

    def __contains__(self, item) -> bool:
        tensor_id = item.id if isinstance(item, Tensor) else item
        return tensor_id in self._tensors

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _tape_stack().pop()


def _tape_stack() -> list:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspende o registo na fita (inferência pura)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _check_finite(op: str, inputs: Sequence[Tensor], data: np.ndarray) -> None:
    if all(np.isfinite(t.data).all() for t in inputs) and not np.isfinite(data).all():
        raise NumericalError(f"Operação '{op}' produziu NaN/Inf a partir de entradas finitas.")


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    if _debug_numerics:
        _check_finite(op, inputs, data)
    out = Tensor(data, name=op)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: formas incompatíveis {a.shape} e {b.shape}.")


# --- Operações elementares ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape('add', a, b)
    return _emit('add', (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape('mul', a, b)
    return _emit('mul', (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit('scale', (a,), a.data * factor, lambda g: (g * factor,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - espelha np.sum
    def backward(g):
        return (np.full_like(a.data, g),)
    return _emit('sum', (a,), np.sum(a.data), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _emit('reshape', (a,), out, lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, start_dim: int = 0) -> Tensor:
    """Achata todas as dimensões a partir de `start_dim` (1 para lotes)."""
    return reshape(a, a.shape[:start_dim] + (-1,))


def take(a: Tensor, index) -> Tensor:
    """
    Seleciona a pontuação de uma classe.

    Vetor (C,) com índice inteiro devolve um escalar; lote (N, C) com
    índices (N,) devolve (N,) com a pontuação de cada linha.
    """
    if a.ndim == 1:
        position = int(index)
        if not 0 <= position < a.shape[0]:
            raise ShapeError(f"take: índice {position} fora de [0, {a.shape[0]}).")

        def backward(g):
            grad = np.zeros_like(a.data)
            grad[position] = g
            return (grad,)
        return _emit('take', (a,), a.data[position], backward)

    rows = np.arange(a.shape[0])
    columns = np.asarray(index, dtype=np.int64)
    if columns.shape != (a.shape[0],):
        raise ShapeError(f"take: esperava {a.shape[0]} índices, recebeu forma {columns.shape}.")
    if columns.size and (columns.min() < 0 or columns.max() >= a.shape[1]):
        raise ShapeError(f"take: índices fora de [0, {a.shape[1]}).")

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[rows, columns] = g
        return (grad,)
    return _emit('take', (a,), a.data[rows, columns], backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit('relu', (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)
    return _emit('softmax', (a,), s, backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """y = x·Wᵀ + b com W de forma (out, in); x é (in,) ou (N, in)."""
    if weights.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: entrada {x.shape} incompatível com pesos {weights.shape}.")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} deveria ser ({weights.shape[0]},).")
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        if x.ndim == 1:
            return g @ weights.data, np.outer(g, x.data), g
        return g @ weights.data, g.T @ x.data, g.sum(axis=0)
    return _emit('dense', (x, weights, bias), out, backward)


# --- Perdas ---

def _labels_array(logits: Tensor, label) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    rows = 1 if logits.ndim == 1 else logits.shape[0]
    if labels.shape != (rows,):
        raise ShapeError(f"Esperava {rows} rótulos, recebeu forma {labels.shape}.")
    classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"Rótulo fora do intervalo de classes [0, {classes}): {labels.tolist()}.")
    return labels


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Entropia cruzada média sobre o lote; rótulo inteiro ou vetor de rótulos."""
    labels = _labels_array(logits, label)
    z = logits.data.reshape(len(labels), -1)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(len(labels))
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1
        grad = grad * (g / len(labels))
        return (grad.reshape(logits.shape).astype(logits.dtype),)
    return _emit('softmax_cross_entropy', (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Erro quadrático médio sobre todos os elementos."""
    _require_same_shape('mse', prediction, target)
    diff = prediction.data - target.data
    loss = np.mean(diff * diff)

    def backward(g):
        grad = diff * (2.0 * g / diff.size)
        return grad, -grad
    return _emit('mse', (prediction, target), np.asarray(loss, dtype=prediction.dtype), backward)


# --- Camadas espaciais ---

def as_pair(value) -> tuple[int, int]:
    """Inteiro ou par (altura, largura) -> par de inteiros."""
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ShapeError(f"Esperava um par (altura, largura); recebi {value}.")
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: esperava entrada (C,H,W) ou (N,C,H,W), recebeu {x.shape}.")


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Correlação cruzada 2D; kernel (C_out, C_in, kH, kW)."""
    x, squeeze = _batched(input, 'conv2d')
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride={stride} deve ser >= 1 e padding={padding} >= 0.")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel deve ter 4 dimensões, recebeu {kernel.shape}.")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: canais de entrada {c_in} != canais do kernel {k_in} (kernel {kernel.shape}).")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} deveria ser ({c_out},).")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: entrada {h}x{w} com padding {padding} menor que o kernel {kh}x{kw}."
        )

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward(g):
        g = g[None] if squeeze else g
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = g.sum(axis=(0, 2, 3))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N, H', W', C_in, kH, kW)
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = np.ascontiguousarray(grad_xp[:, :, padding:padding + h, padding:padding + w])
        return (grad_x[0] if squeeze else grad_x), grad_kernel, grad_bias

    return _emit('conv2d', (input, kernel, bias), out[0] if squeeze else out, backward)


def conv_transpose2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                     padding: int = 0, output_padding: int | tuple = 0) -> Tensor:
    """
    Convolução transposta 2D; kernel (C_in, C_out, k, k).

    Saída H = (H_in - 1)·stride - 2·padding + k + output_padding. O
    output_padding pode ser um par (altura, largura).
    """
    pad_h, pad_w = as_pair(output_padding)
    x, squeeze = _batched(input, 'conv_transpose2d')
    n, c_in, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[0] != c_in:
        raise ShapeError(f"conv_transpose2d: kernel {kernel.shape} incompatível com entrada {input.shape}.")
    _, c_out, kh, kw = kernel.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} deveria ser ({c_out},).")
    if stride < 1 or padding < 0 or not (0 <= pad_h < stride and 0 <= pad_w < stride):
        raise ShapeError(
            f"conv_transpose2d: stride={stride}, padding={padding}, output_padding={output_padding} inválidos."
        )
    h_full = (h - 1) * stride + kh + pad_h
    w_full = (w - 1) * stride + kw + pad_w
    h_out, w_out = h_full - 2 * padding, w_full - 2 * padding
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv_transpose2d: saída vazia ({h_out}x{w_out}).")

    cols = np.tensordot(x, kernel.data, axes=([1], [0]))  # (N, H, W, C_out, kH, kW)
    full = np.zeros((n, c_out, h_full, w_full), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + h_out, padding:padding + w_out] + bias.data[None, :, None, None]

    def backward(g):
        g = g[None] if squeeze else g
        grad_full = np.zeros_like(full)
        grad_full[:, :, padding:padding + h_out, padding:padding + w_out] = g
        grad_cols = np.empty((n, h, w, c_out, kh, kw), dtype=full.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_cols[:, :, :, :, i, j] = (
                    grad_full[:, :, i:i + stride * h:stride, j:j + stride * w:stride].transpose(0, 2, 3, 1)
                )
        grad_x = np.tensordot(grad_cols, kernel.data, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_x = np.ascontiguousarray(grad_x)
        grad_kernel = np.tensordot(x, grad_cols, axes=([0, 2, 3], [0, 1, 2]))
        grad_bias = g.sum(axis=(0, 2, 3))
        return (grad_x[0] if squeeze else grad_x), grad_kernel, grad_bias

    out = np.ascontiguousarray(out)
    return _emit('conv_transpose2d', (input, kernel, bias), out[0] if squeeze else out, backward)


def maxpool2d(input: Tensor, k: int, stride: int) -> Tensor:
    """
    Max pooling; o gradiente vai para o primeiro máximo (ordem row-major)
    de cada janela.
    """
    x, squeeze = _batched(input, 'maxpool2d')
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: k={k} e stride={stride} devem ser >= 1.")
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: janela {k}x{k} excede a entrada {h}x{w}.")
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g = g[None] if squeeze else g
        grad_x = np.zeros_like(x)
        for q in range(k * k):
            i, j = divmod(q, k)
            grad_x[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += np.where(arg == q, g, 0)
        return (grad_x[0] if squeeze else grad_x,)

    out = np.ascontiguousarray(out)
    return _emit('maxpool2d', (input,), out[0] if squeeze else out, backward)


# --- Retropropagação ---

class GradientSet(Mapping):
    """
    Gradientes indexados pelo id do tensor.

    Tensores da fita que não receberam gradiente devolvem zeros com a mesma
    forma; tensores fora da fita levantam `DetachedTensorError`.
    """

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        tensor_id = key.id if isinstance(key, Tensor) else key
        if tensor_id not in self._tape:
            raise DetachedTensorError(f"Tensor {tensor_id} não pertence à fita.")
        grad = self._grads.get(tensor_id)
        if grad is None:
            return np.zeros_like(self._tape.tensor(tensor_id).data)
        return grad

    def __contains__(self, key) -> bool:
        return key in self._tape

    def __iter__(self):
        return iter(self._tape.tensor_ids())

    def __len__(self) -> int:
        return len(self._tape.tensor_ids())


def backward(tape: Tape, output: Tensor, grad_output: np.ndarray | None = None) -> GradientSet:
    """
    Percorre a fita em ordem topológica inversa, visitando cada nó uma vez.

    Sem `grad_output` a saída tem de ser escalar; com ele, qualquer forma
    serve (produto vetor-Jacobiano).
    """
    if not isinstance(output, Tensor) or output not in tape:
        raise DetachedTensorError("A saída pedida não está registada na fita.")
    if grad_output is None:
        if output.data.size != 1:
            raise TapeError(f"backward exige saída escalar; recebeu forma {output.shape}.")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(grad_output, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"grad_output {seed.shape} difere da saída {output.shape}.")

    grads: dict[int, np.ndarray] = {output.id: seed}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output)
        if upstream is None:
            continue
        for tensor_id, contribution in zip(node.inputs, node.backward(upstream)):
            if contribution is None:
                continue
            contribution = np.asarray(contribution, dtype=tape.tensor(tensor_id).dtype)
            if tensor_id in grads:
                grads[tensor_id] = grads[tensor_id] + contribution
            else:
                grads[tensor_id] = contribution
    return GradientSet(tape, grads)


# --- Otimizadores ---

@dataclass
class AdamState:
    """Momentos por parâmetro e contador de passos do Adam."""
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _check_grad_shapes(params: dict, grads: dict) -> None:
    for key, grad in grads.items():
        if key not in params:
            raise ShapeError(f"Gradiente para parâmetro desconhecido {key!r}.")
        if np.shape(grad) != params[key].shape:
            raise ShapeError(f"Parâmetro {key!r}: forma {params[key].shape} != gradiente {np.shape(grad)}.")


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """
    Um passo do Adam. Devolve novos dicionários (cópia na escrita); parâmetros
    sem gradiente ficam intactos.
    """
    _check_grad_shapes(params, grads)
    step = state.step + 1
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    correction1 = 1 - beta1 ** step
    correction2 = 1 - beta2 ** step
    for key, grad in grads.items():
        param = params[key]
        m_key = beta1 * state.m.get(key, np.zeros_like(param)) + (1 - beta1) * grad
        v_key = beta2 * state.v.get(key, np.zeros_like(param)) + (1 - beta2) * grad * grad
        m[key], v[key] = m_key, v_key
        update = lr * (m_key / correction1) / (np.sqrt(v_key / correction2) + eps)
        new_params[key] = (param - update).astype(param.dtype)
    return new_params, AdamState(step, m, v)


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    _check_grad_shapes(params, grads)
    new_params = dict(params)
    for key, grad in grads.items():
        new_params[key] = (params[key] - lr * grad).astype(params[key].dtype)
    return new_params
