"""
Rasterização das camadas semânticas locais (janela 2λ × 2λ em torno de p_t),
camada do agente, reamostragem bilinear e exportação PGM.

Convenção de eixos: x do mundo cresce com a coluna, y cresce para cima
(linha 0 = topo = y_t + λ). Centro do pixel (r, c) em coordenadas locais:
x = -λ + (c + 0.5)/ppm, y = λ - (r + 0.5)/ppm.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from PIL import Image

from modules.mapmodel import MAP_LAYERS, AgentState, SemanticLayerType, VectorMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RasterConfig:
    lambda_m: float = 10.0
    px_per_m: float = 3.0
    out_px: int = 64

    def __post_init__(self):
        if self.lambda_m <= 0 or self.px_per_m <= 0 or self.out_px < 1:
            raise ValueError(f"RasterConfig inválido: {self}")
        if self.native_px < 1:
            raise ValueError(f"RasterConfig: janela nativa vazia ({self})")

    @property
    def native_px(self) -> int:
        """Lado do raster antes da reamostragem (2·λ·ppm)"""
        return int(round(2.0 * self.lambda_m * self.px_per_m))

    def pixel_centers(self):
        """(xs por coluna, ys por linha) em metros relativos a p_t"""
        idx = np.arange(self.native_px, dtype=np.float64) + 0.5
        return -self.lambda_m + idx / self.px_per_m, self.lambda_m - idx / self.px_per_m

    def to_dict(self) -> dict:
        return {"lambda_m": self.lambda_m, "px_per_m": self.px_per_m, "out_px": self.out_px}


@dataclass(frozen=True)
class ChunkStack:
    origin: np.ndarray        # p_t em metros do mundo
    layers: np.ndarray        # [5, out_px, out_px] em [0, 1]


def fill_polygon(vertices: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """
    Preenchimento por linhas de varredura com amostragem no centro do pixel.

    vertices em coordenadas locais; regra par-ímpar, arestas semiabertas em y.
    Retorna máscara booleana [len(ys), len(xs)].
    """
    mask = np.zeros((len(ys), len(xs)), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    if x0.max() < xs[0] or x0.min() > xs[-1] or y0.max() < ys[-1] or y0.min() > ys[0]:
        return mask

    with np.errstate(divide="ignore", invalid="ignore"):
        for r, y in enumerate(ys):
            crossing = (y0 <= y) != (y1 <= y)
            if not crossing.any():
                continue
            xa, ya, xb, yb = x0[crossing], y0[crossing], x1[crossing], y1[crossing]
            hits = np.sort(xa + (y - ya) * (xb - xa) / (yb - ya))
            for left, right in zip(hits[0::2], hits[1::2]):
                start, stop = np.searchsorted(xs, [left, right], side="left")
                mask[r, start:stop] = True
    return mask


def extract_layer(vector_map: VectorMap, p_t, cfg: RasterConfig, layer: SemanticLayerType) -> np.ndarray:
    """Ocupação binária da camada na janela [p_t ± λ], antes da reamostragem"""
    if layer is SemanticLayerType.AGENT_BOX:
        raise ValueError("extract_layer não aceita AGENT_BOX (use render_agent_layer)")
    xs, ys = cfg.pixel_centers()
    origin = np.asarray(p_t, dtype=np.float64)
    mask = np.zeros((cfg.native_px, cfg.native_px), dtype=bool)
    for polygon in vector_map.polygons(layer):
        mask |= fill_polygon(polygon - origin, xs, ys)
    return mask.astype(np.float32)


def agent_rotation_degrees(theta: float) -> float:
    """θ̂ = (π/2 + sign(-θ)·|θ|)·180/π, com sign(0) = +1"""
    sign = 1.0 if -theta >= 0 else -1.0
    return math.degrees(math.pi / 2 + sign * abs(theta))


def render_agent_layer(p_t, theta: float, length_m: float, width_m: float, cfg: RasterConfig) -> np.ndarray:
    """
    Caixa do agente centrada na janela (isto é, em p_t).

    A caixa começa voltada para cima (comprimento ao longo de +y) e gira
    θ̂ graus no sentido anti-horário; os cantos giram antes do preenchimento.
    """
    if length_m <= 0 or width_m <= 0:
        raise ValueError(f"dimensões do agente devem ser positivas: {length_m} x {width_m}")
    angle = math.radians(agent_rotation_degrees(theta))
    c, s = math.cos(angle), math.sin(angle)
    half_w, half_l = width_m / 2.0, length_m / 2.0
    corners = np.array([[-half_w, -half_l], [half_w, -half_l], [half_w, half_l], [-half_w, half_l]])
    rotated = corners @ np.array([[c, s], [-s, c]])
    xs, ys = cfg.pixel_centers()
    return fill_polygon(rotated, xs, ys).astype(np.float32)


def upscale(raster: np.ndarray, out_px: int = 64) -> np.ndarray:
    """Reamostragem bilinear do Pillow (imagem modo F); valores mantidos em [0, 1]"""
    image = Image.fromarray(np.ascontiguousarray(raster, dtype=np.float32))
    resized = image.resize((out_px, out_px), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def rasterize_chunk_stack(vector_map: VectorMap, state: AgentState, length_m: float, width_m: float,
                          cfg: RasterConfig = None) -> ChunkStack:
    """Pilha [5, out_px, out_px] na ordem de SemanticLayerType"""
    cfg = cfg or RasterConfig()
    p_t = state.position
    layers = [upscale(extract_layer(vector_map, p_t, cfg, layer), cfg.out_px) for layer in MAP_LAYERS]
    agent = render_agent_layer(p_t, state.yaw, length_m, width_m, cfg)
    layers.append(upscale(agent, cfg.out_px))
    return ChunkStack(origin=p_t, layers=np.stack(layers))


def to_grayscale(layer: np.ndarray) -> np.ndarray:
    return np.round(np.clip(layer, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_pgm(layers: np.ndarray, out_dir: str, sample_name: str,
               layer_names: Sequence[str] = None) -> List[str]:
    """Um arquivo PGM binário (P5, maxval 255) por canal: {sample}_{layer}.pgm"""
    layer_names = layer_names or [t.key for t in SemanticLayerType]
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for layer, name in zip(layers, layer_names):
        path = os.path.join(out_dir, f"{sample_name}_{name}.pgm")
        Image.fromarray(to_grayscale(layer)).save(path, format="PPM")
        paths.append(path)
    logger.debug(f"{len(paths)} camadas exportadas para {out_dir}")
    return paths
