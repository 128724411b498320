"""
Modelo completo: codificação do estado, fusão temporal por LSTM dos pares
(z_t, estado codificado), decodificador de deslocamentos e persistência em
checkpoint binário.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from modules.capsencoder import CapsEncoderParams, EncoderGeometry, encode_chunks, glorot_uniform
from modules.config import ConfigError
from modules.mapmodel import STATE_FEATURES, Sample, StandardizationStats
from modules.numcore import (
    LSTMParams, ShapeError, Tensor, affine, concat, elu, get_default_dtype, lstm_cell, parameter, reshape,
)
from modules.rasterizer import RasterConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CAPM"
CHECKPOINT_VERSION = 1

# Tamanho do estado oculto da LSTM por geometria
LSTM_HIDDEN = {"full": 128, "tiny": 8}


class CheckpointError(ValueError):
    """Checkpoint corrompido, truncado ou incompatível"""


@dataclass(frozen=True)
class ModelConfig:
    rho: int = 5
    tau: int = 12
    routing_iterations: int = 3
    geometry: str = "full"
    map_steps: str = "all"        # all: um chunk por passo observado; last: só o chunk em t
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self):
        if self.rho < 1 or self.tau < 1:
            raise ConfigError(f"rho/tau devem ser >= 1 (rho={self.rho}, tau={self.tau})")
        if self.map_steps not in ("all", "last"):
            raise ConfigError(f"map_steps desconhecido: {self.map_steps}")
        if self.geometry not in LSTM_HIDDEN:
            raise ConfigError(f"geometry desconhecida: {self.geometry}")
        if self.encoder_geometry.in_px != self.raster.out_px:
            raise ConfigError(
                f"out_px={self.raster.out_px} incompatível com a geometria '{self.geometry}' "
                f"(entrada de {self.encoder_geometry.in_px} px)")

    @property
    def encoder_geometry(self) -> EncoderGeometry:
        return EncoderGeometry.by_name(self.geometry)

    @property
    def hidden_size(self) -> int:
        return LSTM_HIDDEN[self.geometry]

    def to_dict(self) -> dict:
        return {"rho": self.rho, "tau": self.tau, "routing_iterations": self.routing_iterations,
                "geometry": self.geometry, "map_steps": self.map_steps, "raster": self.raster.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        raster = RasterConfig(**data.pop("raster", {}))
        return cls(raster=raster, **data)


@dataclass
class PredictorParams:
    caps: CapsEncoderParams
    state_weight: Tensor          # [5, F]
    state_bias: Tensor            # [F]
    lstm: LSTMParams              # entrada 2F, oculto H
    decoder_weight: Tensor        # [H, 2·tau]
    decoder_bias: Tensor          # [2·tau]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, zero: bool = False) -> "PredictorParams":
        rng = np.random.default_rng(seed)
        geometry = config.encoder_geometry
        f, h, out = geometry.final_dim, config.hidden_size, 2 * config.tau
        n_state = len(STATE_FEATURES)

        def weight(shape, name):
            return parameter(np.zeros(shape) if zero else glorot_uniform(rng, shape, shape[0], shape[1]), name)

        caps = CapsEncoderParams.init(geometry, rng, zero=zero)
        return cls(
            caps=caps,
            state_weight=weight((n_state, f), "state_fc.weight"),
            state_bias=parameter(np.zeros(f), "state_fc.bias"),
            lstm=LSTMParams(
                w_x=weight((2 * f, 4 * h), "lstm.w_x"),
                w_h=weight((h, 4 * h), "lstm.w_h"),
                bias=parameter(np.zeros(4 * h), "lstm.bias"),
            ),
            decoder_weight=weight((h, out), "decoder.weight"),
            decoder_bias=parameter(np.zeros(out), "decoder.bias"),
        )

    def named_tensors(self) -> Dict[str, Tensor]:
        named = dict(self.caps.named_tensors())
        for t in [self.state_weight, self.state_bias, *self.lstm.tensors(), self.decoder_weight, self.decoder_bias]:
            named[t.name] = t
        return named

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def backbone_count(self) -> int:
        return self.caps.parameter_count()


def encode_state(state, params: PredictorParams) -> Tensor:
    """ELU(affine) de 5 -> F sobre o último eixo"""
    state = state if isinstance(state, Tensor) else Tensor(state)
    return elu(affine(state, params.state_weight, params.state_bias))


def fuse_and_encode(z_seq: Tensor, state_seq: Tensor, lstm: LSTMParams) -> Tensor:
    """
    Concatena (z_t, estado_t) por passo, do mais antigo ao mais recente, e
    roda a LSTM a partir do estado zero; devolve o último h.
    """
    if z_seq.shape[:-1] != state_seq.shape[:-1]:
        raise ShapeError(f"fuse_and_encode: sequências desalinhadas {z_seq.shape} x {state_seq.shape}")
    steps = z_seq.shape[-2]
    lead = z_seq.shape[:-2]
    dtype = np.result_type(z_seq.data.dtype, state_seq.data.dtype)
    h = Tensor(np.zeros(lead + (lstm.hidden_size,), dtype=dtype))
    c = Tensor(np.zeros(lead + (lstm.hidden_size,), dtype=dtype))
    for t in range(steps):
        x = concat([z_seq[..., t, :], state_seq[..., t, :]], axis=-1)
        h, c = lstm_cell(x, h, c, lstm)
    return h


def decode(h: Tensor, params: PredictorParams) -> Tensor:
    """h -> [..., tau, 2] (linha j = deslocamento no passo j+1, colunas x, y)"""
    out = affine(h, params.decoder_weight, params.decoder_bias)
    return reshape(out, out.shape[:-1] + (out.shape[-1] // 2, 2))


def check_sample(sample: Sample, config: ModelConfig):
    """ConfigError nomeando o campo incompatível"""
    p = config.raster.out_px
    if sample.state.shape != (config.rho, len(STATE_FEATURES)):
        raise ConfigError(f"rho: amostra com {sample.state.shape[0]} passos, modelo espera {config.rho}")
    if sample.chunks.shape[0] != config.rho:
        raise ConfigError(f"rho: amostra com {sample.chunks.shape[0]} chunks, modelo espera {config.rho}")
    if sample.chunks.shape[-2:] != (p, p):
        raise ConfigError(f"out_px: chunks de {sample.chunks.shape[-1]} px, modelo espera {p}")
    if sample.target is not None and sample.target.shape != (config.tau, 2):
        raise ConfigError(f"tau: alvo com {sample.target.shape[0]} passos, modelo espera {config.tau}")


def forward_batch(samples: Sequence[Sample], params: PredictorParams, config: ModelConfig) -> Tensor:
    """Predição [B, tau, 2] para um lote de amostras"""
    for sample in samples:
        check_sample(sample, config)
    dtype = get_default_dtype()
    batch = len(samples)
    geometry = config.encoder_geometry
    if config.map_steps == "all":
        chunks = np.stack([s.chunks for s in samples]).astype(dtype)          # [B, rho, 5, P, P]
        z = encode_chunks(chunks, params.caps, config.routing_iterations).z   # [B, rho, F]
    else:
        chunks = np.stack([s.chunks[-1] for s in samples]).astype(dtype)      # [B, 5, P, P]
        z_last = encode_chunks(chunks, params.caps, config.routing_iterations).z
        z_last = reshape(z_last, (batch, 1, geometry.final_dim))
        z = concat([z_last] * config.rho, axis=1)
    states = Tensor(np.stack([s.state for s in samples]).astype(dtype))       # [B, rho, 5]
    h = fuse_and_encode(z, encode_state(states, params), params.lstm)
    return decode(h, params)


def forward(sample: Sample, params: PredictorParams, config: ModelConfig) -> Tensor:
    """Predição [tau, 2] de uma amostra"""
    out = forward_batch([sample], params, config)
    return reshape(out, (config.tau, 2))


# ----------------------------------------------------------------------
# Checkpoint
# ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    stats: StandardizationStats
    params: PredictorParams
    training: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_bytes(params: PredictorParams, stats: StandardizationStats, config: ModelConfig,
                     training: Optional[dict] = None) -> bytes:
    """
    Layout: "CAPM", u32 versão, u32 tamanho + blob JSON (config, stats,
    treino), depois registros (u32 tamanho do nome, nome, u32 rank, u32 dims,
    float32 little-endian) até o fim do arquivo.
    """
    blob = json.dumps({"config": config.to_dict(), "stats": stats.to_dict(), "training": training or {}},
                      sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for name, tensor in params.named_tensors().items():
        encoded = name.encode("utf-8")
        shape = tensor.shape
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: PredictorParams, stats: StandardizationStats, config: ModelConfig, path: str,
                    training: Optional[dict] = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, stats, config, training))
    logger.info(f"Checkpoint gravado em {path} ({params.parameter_count():,} parâmetros)")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"checkpoint truncado ao ler {what} (offset {self.offset})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("magic inválido (arquivo não é um checkpoint CAPM)")
    raw_version = reader.take(4, "versão")
    version = struct.unpack("<I", raw_version)[0]
    if version != CHECKPOINT_VERSION:
        if struct.unpack(">I", raw_version)[0] == CHECKPOINT_VERSION:
            raise CheckpointError("checkpoint gravado com ordem de bytes estrangeira (big-endian)")
        raise CheckpointError(f"versão de checkpoint não suportada: {version}")
    blob_size = reader.u32("tamanho do blob")
    try:
        header = json.loads(reader.take(blob_size, "blob de configuração").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        stats = StandardizationStats.from_dict(header["stats"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"blob de configuração inválido: {e}") from e

    params = PredictorParams.init(config, zero=True)
    expected = params.named_tensors()
    seen = set()
    while not reader.exhausted:
        name = reader.take(reader.u32("tamanho do nome"), "nome").decode("utf-8", errors="replace")
        rank = reader.u32(f"rank de {name}")
        if rank > 8:
            raise CheckpointError(f"{name}: rank inválido {rank}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dimensões de {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size, f"dados de {name}"), dtype="<f4")
        if name not in expected:
            raise CheckpointError(f"parâmetro desconhecido no checkpoint: {name}")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(f"{name}: formato {tuple(shape)} incompatível com a configuração "
                                  f"(esperado {expected[name].shape})")
        if name in seen:
            raise CheckpointError(f"parâmetro duplicado: {name}")
        seen.add(name)
        expected[name].data = values.reshape(shape).astype(get_default_dtype())
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"parâmetros ausentes no checkpoint: {', '.join(missing[:5])}")
    return Checkpoint(config, stats, params, header.get("training", {}), version)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"não foi possível ler {path}: {e}") from e
    return parse_checkpoint(data)


def describe_checkpoint(ckpt: Checkpoint) -> dict:
    """Resumo para inspeção: versão, config, formatos, contagens, stats"""
    tensors = [{"name": n, "shape": list(t.shape), "size": t.size} for n, t in ckpt.params.named_tensors().items()]
    return {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "tensors": tensors,
        "total_parameters": ckpt.params.parameter_count(),
        "backbone_parameters": ckpt.params.backbone_count(),
        "stats": ckpt.stats.to_dict(),
        "training": ckpt.training,
    }
