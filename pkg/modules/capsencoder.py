"""
Codificador de cápsulas em quatro estágios: base convolucional compartilhada,
cápsulas inferiores (4 ramos de duas convoluções), uma cápsula superior por
tipo de camada semântica e a cápsula final que produz o vetor z_t.

Todas as operações aceitam eixos de lote à esquerda.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from modules.numcore import (
    ShapeError, Tensor, concat, conv2d, conv_output_size, elu, get_default_dtype, matmul, mul,
    parameter, reshape, softmax_array, squash, stack, tensor_sum, transpose,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderGeometry:
    """Tamanhos de kernels, strides e canais de cada estágio"""

    in_px: int = 64
    base_kernel: int = 9
    base_stride: int = 2
    base_channels: int = 64
    lower_kernel: int = 9
    lower_stride: int = 2
    lower_channels: int = 32
    pool_kernel: int = 2
    pool_stride: int = 2
    pool_channels: int = 16
    capsule_dim: int = 4          # um componente por ramo
    higher_dim: int = 32
    final_dim: int = 128
    n_layers: int = 5

    @classmethod
    def full(cls) -> "EncoderGeometry":
        """64 -> 28 -> 10 -> 5; 400 cápsulas 4D, 5 x 32D, 128D"""
        return cls()

    @classmethod
    def tiny(cls) -> "EncoderGeometry":
        """16 -> 14 -> 6 -> 3; usado em checagens de gradiente e testes rápidos"""
        return cls(in_px=16, base_kernel=3, base_stride=1, base_channels=4,
                   lower_kernel=3, lower_stride=2, lower_channels=4,
                   pool_kernel=2, pool_stride=2, pool_channels=2,
                   higher_dim=6, final_dim=8)

    @classmethod
    def by_name(cls, name: str) -> "EncoderGeometry":
        if name == "full":
            return cls.full()
        if name == "tiny":
            return cls.tiny()
        raise ValueError(f"geometria desconhecida: {name}")

    @property
    def base_px(self) -> int:
        return conv_output_size(self.in_px, self.base_kernel, self.base_stride)

    @property
    def lower_px(self) -> int:
        return conv_output_size(self.base_px, self.lower_kernel, self.lower_stride)

    @property
    def capsule_px(self) -> int:
        return conv_output_size(self.lower_px, self.pool_kernel, self.pool_stride)

    @property
    def n_capsules(self) -> int:
        return self.pool_channels * self.capsule_px ** 2

    def parameter_count(self) -> int:
        base = self.base_kernel ** 2 * self.base_channels + self.base_channels
        conv1 = self.lower_kernel ** 2 * self.base_channels * self.lower_channels + self.lower_channels
        conv2 = self.pool_kernel ** 2 * self.lower_channels * self.pool_channels + self.pool_channels
        higher = self.n_capsules * self.capsule_dim * self.higher_dim
        final = self.n_layers * self.higher_dim * self.final_dim
        return base + self.capsule_dim * (conv1 + conv2) + self.n_layers * higher + final


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LowerBranch:
    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor


@dataclass
class CapsEncoderParams:
    geometry: EncoderGeometry
    base_kernel: Tensor
    base_bias: Tensor
    branches: List[LowerBranch]
    higher: List[Tensor]          # n_layers x [n_capsules, capsule_dim, higher_dim]
    final: Tensor                 # [n_layers, higher_dim, final_dim]

    @classmethod
    def init(cls, geometry: EncoderGeometry, rng: Optional[np.random.Generator] = None,
             zero: bool = False) -> "CapsEncoderParams":
        """Glorot uniforme por tensor, vieses zero; zero=True zera tudo"""
        rng = rng if rng is not None else np.random.default_rng(0)
        g = geometry

        def weight(shape, fan_in, fan_out, name):
            data = np.zeros(shape) if zero else glorot_uniform(rng, shape, fan_in, fan_out)
            return parameter(data, name)

        def bias(size, name):
            return parameter(np.zeros(size), name)

        kb, kl, kp = g.base_kernel, g.lower_kernel, g.pool_kernel
        base_kernel = weight((kb, kb, 1, g.base_channels), kb * kb, kb * kb * g.base_channels, "caps.base.kernel")
        base_bias = bias(g.base_channels, "caps.base.bias")
        branches = []
        for b in range(g.capsule_dim):
            prefix = f"caps.lower{b}"
            branches.append(LowerBranch(
                conv1_kernel=weight((kl, kl, g.base_channels, g.lower_channels),
                                    kl * kl * g.base_channels, kl * kl * g.lower_channels, f"{prefix}.conv1.kernel"),
                conv1_bias=bias(g.lower_channels, f"{prefix}.conv1.bias"),
                conv2_kernel=weight((kp, kp, g.lower_channels, g.pool_channels),
                                    kp * kp * g.lower_channels, kp * kp * g.pool_channels, f"{prefix}.conv2.kernel"),
                conv2_bias=bias(g.pool_channels, f"{prefix}.conv2.bias"),
            ))
        higher = [weight((g.n_capsules, g.capsule_dim, g.higher_dim), g.capsule_dim, g.higher_dim,
                         f"caps.higher{i}.w") for i in range(g.n_layers)]
        final = weight((g.n_layers, g.higher_dim, g.final_dim), g.higher_dim, g.final_dim, "caps.final.w")
        return cls(g, base_kernel, base_bias, branches, higher, final)

    def named_tensors(self) -> Dict[str, Tensor]:
        tensors = [self.base_kernel, self.base_bias]
        for branch in self.branches:
            tensors += [branch.conv1_kernel, branch.conv1_bias, branch.conv2_kernel, branch.conv2_bias]
        tensors += self.higher + [self.final]
        return {t.name: t for t in tensors}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


@dataclass
class CapsEncoderOutput:
    z: Tensor                     # [..., final_dim]
    per_layer: Tensor             # [..., n_layers, higher_dim]

    def diagnostics(self) -> Dict[str, np.ndarray]:
        """Normas das cápsulas (todas < 1)"""
        return {
            "z_norm": np.linalg.norm(self.z.data, axis=-1),
            "per_layer_norm": np.linalg.norm(self.per_layer.data, axis=-1),
        }


def conv_base(layer, params: CapsEncoderParams) -> Tensor:
    """[..., P, P] ou [..., P, P, 1] -> ELU(conv k9 s2) [..., 28, 28, 64]"""
    g = params.geometry
    x = layer if isinstance(layer, Tensor) else Tensor(layer)
    if x.shape[-2:] == (g.in_px, g.in_px):
        x = reshape(x, x.shape + (1,))
    if x.shape[-3:] != (g.in_px, g.in_px, 1):
        raise ShapeError(f"conv_base: entrada {x.shape}, esperado [..., {g.in_px}, {g.in_px}]")
    return elu(conv2d(x, params.base_kernel, g.base_stride) + params.base_bias)


def lower_capsules(features: Tensor, params: CapsEncoderParams) -> Tensor:
    """
    [..., 28, 28, 64] -> [..., 400, 4] com squash por cápsula.

    Os quatro ramos (conv k9 s2 -> conv k2 s2, sem ativação entre elas)
    rodam como uma única convolução concatenada no primeiro estágio. O i-ésimo
    escalar de cada ramo (ordem canal, linha, coluna) é a componente do ramo
    na cápsula i.
    """
    g = params.geometry
    lead = features.shape[:-3]
    kernels = concat([b.conv1_kernel for b in params.branches], axis=3)
    biases = concat([b.conv1_bias for b in params.branches], axis=0)
    hidden = conv2d(features, kernels, g.lower_stride) + biases
    components = []
    for k, branch in enumerate(params.branches):
        part = hidden[..., k * g.lower_channels:(k + 1) * g.lower_channels]
        out = conv2d(part, branch.conv2_kernel, g.pool_stride) + branch.conv2_bias
        nd = out.ndim
        channel_major = transpose(out, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))
        components.append(reshape(channel_major, lead + (g.n_capsules,)))
    return squash(stack(components, axis=-1))


def dynamic_routing(predictions: Tensor, iterations: int) -> Tensor:
    """
    Roteamento por concordância: û [..., N_in, N_out, D] -> v [..., N_out, D].

    Os logits b são estado não treinável recalculado a cada forward; o
    gradiente passa pela soma ponderada e pelo squash da última iteração.
    """
    if iterations < 1:
        raise ValueError(f"iterations deve ser >= 1, recebeu {iterations}")
    u_hat = predictions.data
    logits = np.zeros(u_hat.shape[:-1], dtype=u_hat.dtype)
    for it in range(iterations):
        coupling = softmax_array(logits, axis=-1)
        if it == iterations - 1:
            weighted = mul(Tensor(coupling[..., None]), predictions)
            return squash(tensor_sum(weighted, axis=-3))
        s = np.sum(coupling[..., None] * u_hat, axis=-3, dtype=np.float64).astype(u_hat.dtype)
        v = squash(Tensor(s)).data
        logits = logits + np.sum(u_hat * v[..., None, :, :], axis=-1, dtype=np.float64).astype(u_hat.dtype)


def higher_capsule(layer_index: int, capsules: Tensor, params: CapsEncoderParams,
                   iterations: int = 3) -> Tensor:
    """[..., 400, 4] -> [..., 32] com o W próprio da camada layer_index"""
    g = params.geometry
    if not 0 <= layer_index < g.n_layers:
        raise ValueError(f"layer_index fora de 0..{g.n_layers - 1}: {layer_index}")
    lead = capsules.shape[:-2]
    u = reshape(capsules, lead + (g.n_capsules, 1, g.capsule_dim))
    u_hat = matmul(u, params.higher[layer_index])                    # [..., 400, 1, 32]
    return reshape(dynamic_routing(u_hat, iterations), lead + (g.higher_dim,))


def _higher_all(capsules: Tensor, params: CapsEncoderParams, iterations: int) -> Tensor:
    """[..., 5, 400, 4] -> [..., 5, 32]; cada camada com seu W (em lote)"""
    g = params.geometry
    lead = capsules.shape[:-3]
    u = reshape(capsules, lead + (g.n_layers, g.n_capsules, 1, g.capsule_dim))
    u_hat = matmul(u, stack(params.higher, axis=0))                  # [..., 5, 400, 1, 32]
    return reshape(dynamic_routing(u_hat, iterations), lead + (g.n_layers, g.higher_dim))


def final_capsule(per_layer: Tensor, params: CapsEncoderParams, iterations: int = 3) -> Tensor:
    """[..., 5, 32] -> [..., 128]"""
    g = params.geometry
    per_layer = per_layer if isinstance(per_layer, Tensor) else Tensor(per_layer)
    lead = per_layer.shape[:-2]
    u = reshape(per_layer, lead + (g.n_layers, 1, g.higher_dim))
    u_hat = matmul(u, params.final)                                  # [..., 5, 1, 128]
    return reshape(dynamic_routing(u_hat, iterations), lead + (g.final_dim,))


def encode_chunks(layers, params: CapsEncoderParams, iterations: int = 3) -> CapsEncoderOutput:
    """
    [..., 5, P, P] -> z [..., 128].

    Base e cápsulas inferiores compartilhadas entre os canais; cápsula
    superior escolhida pela posição do canal.
    """
    g = params.geometry
    x = layers if isinstance(layers, Tensor) else Tensor(np.asarray(layers, dtype=get_default_dtype()))
    if x.shape[-3:] != (g.n_layers, g.in_px, g.in_px):
        raise ShapeError(f"encode_chunks: entrada {x.shape}, esperado [..., {g.n_layers}, {g.in_px}, {g.in_px}]")
    lead = x.shape[:-3]
    caps = lower_capsules(conv_base(x, params), params)              # [..., 5, 400, 4]
    per_layer = _higher_all(caps, params, iterations)
    z = final_capsule(per_layer, params, iterations)
    return CapsEncoderOutput(z=reshape(z, lead + (g.final_dim,)), per_layer=per_layer)


def encode_chunk(stack_or_layers, params: CapsEncoderParams, iterations: int = 3) -> CapsEncoderOutput:
    """Uma pilha de camadas (ChunkStack ou array [5, P, P])"""
    layers = getattr(stack_or_layers, "layers", stack_or_layers)
    return encode_chunks(layers, params, iterations)
