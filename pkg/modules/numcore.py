"""
Motor de tensores denso com diferenciação reversa (fita por forward),
operadores usados pelo modelo e otimizador Adam.

Armazenamento em float32 por padrão; reduções acumulam em float64.
A precisão padrão é por thread (ver default_dtype).
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

logger = logging.getLogger(__name__)

SQUASH_EPSILON = 1e-7

_local = threading.local()


class ShapeError(ValueError):
    """Formatos incompatíveis entre operandos"""


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    """Trocar a precisão padrão da thread atual (ex.: float64 em checagens de gradiente)"""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def _as_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
        return value
    return np.asarray(value, dtype=get_default_dtype())


class Tensor:
    """Array denso participando do grafo de diferenciação da thread atual"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Tensor treinável (folha do grafo)"""
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Criar nó do grafo; sem pais treináveis não há registro na fita"""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _reduce_sum(array: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    return np.sum(array, axis=axis, keepdims=keepdims, dtype=np.float64).astype(array.dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = _reduce_sum(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = _reduce_sum(grad, axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# Operações elementares
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), backward)


def square(x) -> Tensor:
    x = _lift(x)
    out = x.data * x.data

    def backward(g):
        return (2.0 * x.data * g,)
    return _make(out, (x,), backward)


def absolute(x) -> Tensor:
    """|x|; subgradiente 0 em x == 0"""
    x = _lift(x)
    out = np.abs(x.data)

    def backward(g):
        return (np.sign(x.data).astype(x.data.dtype) * g,)
    return _make(out, (x,), backward)


def elu(x) -> Tensor:
    """ELU com alpha = 1"""
    x = _lift(x)
    negative = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative).astype(x.data.dtype)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, negative + 1.0).astype(x.data.dtype),)
    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _make(out, (x,), backward)


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)
    return _make(out, (x,), backward)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax estável (subtração do máximo) ao longo de axis"""
    x = _lift(x)
    out = softmax_array(x.data, axis)

    def backward(g):
        inner = _reduce_sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)
    return _make(out, (x,), backward)


def squash(v, epsilon: float = SQUASH_EPSILON) -> Tensor:
    """
    Não-linearidade de cápsula ao longo do último eixo:
    (‖v‖²/(1+‖v‖²)) · v/(‖v‖+epsilon). Vetor nulo vai para o vetor nulo.
    """
    v = _lift(v)
    n2 = np.sum(v.data.astype(np.float64) ** 2, axis=-1, keepdims=True)
    n = np.sqrt(n2)
    denom = (1.0 + n2) * (n + epsilon)
    scale = n2 / denom
    out = (v.data * scale).astype(v.data.dtype)

    def backward(g):
        # d scale/dn dividido por n, sem divisão por n
        d_denom = 2.0 * n * (n + epsilon) + (1.0 + n2)
        dscale_over_n = (2.0 * denom - n * d_denom) / (denom * denom)
        gv = np.sum(g.astype(np.float64) * v.data, axis=-1, keepdims=True)
        grad = g * scale + v.data * (dscale_over_n * gv)
        return (grad.astype(v.data.dtype),)
    return _make(out, (v,), backward)


# ----------------------------------------------------------------------
# Formato e indexação
# ----------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)
    return _make(out, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _make(out, (x,), backward)


def getitem(x, index) -> Tensor:
    x = _lift(x)
    out = x.data[index]

    items = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in items)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)
    return _make(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tensors, backward)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = _reduce_sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
    return _make(np.asarray(out), (x,), backward)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    total = tensor_sum(x, axis=axis, keepdims=keepdims)
    return mul(total, 1.0 / count)


# ----------------------------------------------------------------------
# Álgebra linear e convolução
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """np.matmul com broadcasting de lotes; ambos os operandos com ndim >= 2"""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requer ndim >= 2: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimensão interna incompatível {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), backward)


def affine(x, weight, bias) -> Tensor:
    """x·weight + bias sobre o último eixo de x"""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],) or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: x{x.shape} · W{weight.shape} + b{bias.shape}")
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[1],)) + bias
    return matmul(x, weight) + bias


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _windows(x4: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    sb, sh, sw, sc = x4.strides
    return as_strided(x4, shape=(x4.shape[0], ho, wo, k, k, x4.shape[3]),
                      strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """
    Convolução 2D sem padding.

    x: [..., H, W, Cin]; kernels: [k, k, Cin, Cout] -> [..., H', W', Cout]
    com H' = floor((H - k)/stride) + 1.
    """
    x, kernels = _lift(x), _lift(kernels)
    if x.ndim < 3 or kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d: entrada {x.shape}, kernels {kernels.shape}")
    k, _, cin, cout = kernels.shape
    h, w, c = x.shape[-3:]
    if c != cin:
        raise ShapeError(f"conv2d: canais de entrada {c} != Cin do kernel {cin}")
    if h < k or w < k:
        raise ShapeError(f"conv2d: entrada {h}x{w} menor que o kernel {k}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride inválido {stride}")

    lead = x.shape[:-3]
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    x4 = np.ascontiguousarray(x.data.reshape((-1, h, w, c)))
    out = np.tensordot(_windows(x4, k, stride, ho, wo), kernels.data, axes=([3, 4, 5], [0, 1, 2]))
    out = out.reshape(lead + (ho, wo, cout))

    def backward(g):
        g4 = np.ascontiguousarray(g.reshape((-1, ho, wo, cout)))
        win = _windows(x4, k, stride, ho, wo)
        gk = np.tensordot(win, g4, axes=([0, 1, 2], [0, 1, 2])).astype(kernels.data.dtype)
        gx = np.zeros_like(x4)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                gx[:, i:i + span_h:stride, j:j + span_w:stride, :] += g4 @ kernels.data[i, j].T
        return gx.reshape(x.shape), gk
    return _make(out, (x, kernels), backward)


# ----------------------------------------------------------------------
# LSTM
# ----------------------------------------------------------------------

@dataclass
class LSTMParams:
    """Pesos de uma camada LSTM; portas na ordem (input, forget, candidate, output)"""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, prefix: str = "lstm") -> "LSTMParams":
        return cls(
            w_x=parameter(np.zeros((input_size, 4 * hidden_size)), f"{prefix}.w_x"),
            w_h=parameter(np.zeros((hidden_size, 4 * hidden_size)), f"{prefix}.w_h"),
            bias=parameter(np.zeros(4 * hidden_size), f"{prefix}.bias"),
        )

    def tensors(self) -> List[Tensor]:
        return [self.w_x, self.w_h, self.bias]


def lstm_cell(x, h_prev, c_prev, params: LSTMParams) -> Tuple[Tensor, Tensor]:
    """Um passo da recorrência LSTM (aceita lote no eixo 0)"""
    x, h_prev, c_prev = _lift(x), _lift(h_prev), _lift(c_prev)
    hidden = params.hidden_size
    if x.shape[-1] != params.input_size:
        raise ShapeError(f"lstm_cell: entrada {x.shape[-1]} != {params.input_size}")
    if h_prev.shape[-1] != hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_cell: estado h{h_prev.shape} c{c_prev.shape} != {hidden}")

    gates = affine(x, params.w_x, params.bias) + _rowwise(h_prev, params.w_h)
    i = sigmoid(gates[..., 0:hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:4 * hidden])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def _rowwise(h: Tensor, weight: Tensor) -> Tensor:
    if h.ndim == 1:
        return reshape(matmul(reshape(h, (1, -1)), weight), (weight.shape[1],))
    return matmul(h, weight)


# ----------------------------------------------------------------------
# Diferenciação reversa
# ----------------------------------------------------------------------

class GradientMap(dict):
    """Gradientes por tensor treinável (chave = o próprio Tensor)"""

    def by_name(self) -> Dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name}


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """
    Percorrer a fita em ordem reversa a partir de um escalar.

    Retorna o gradiente de cada tensor treinável alcançável; a fita é
    liberada ao final (os nós intermediários perdem os pais).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requer um escalar, recebeu formato {loss.shape}")
    result = GradientMap()
    if not loss.requires_grad:
        return result

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            result[node] = grad if node not in result else result[node] + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    return result


def sum_gradient_maps(maps: Iterable[Mapping[Tensor, np.ndarray]]) -> GradientMap:
    """Redução em ordem fixa (a ordem de iteração de maps)"""
    total = GradientMap()
    for grads in maps:
        for tensor, grad in grads.items():
            total[tensor] = grad if tensor not in total else total[tensor] + grad
    return total


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[Tensor, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """
    Atualização Adam com correção de viés (escritor único).

    params: nome -> Tensor treinável; tensores sem gradiente recebem gradiente zero.
    """
    if lr <= 0:
        raise ValueError(f"lr deve ser > 0, recebeu {lr}")
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(param)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"adam_step: gradiente {grad.shape} != parâmetro {name} {param.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = (state.beta1 * m + (1.0 - state.beta1) * grad).astype(param.data.dtype)
        v = (state.beta2 * v + (1.0 - state.beta2) * grad * grad).astype(param.data.dtype)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.data = (param.data - update).astype(param.data.dtype)
    return state
