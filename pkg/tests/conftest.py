import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from modules.mapmodel import (  # noqa: E402
    AgentState, Track, VectorMap, build_samples, compute_stats, generate_scenario, window_state_rows,
)
from modules.numcore import default_dtype  # noqa: E402
from modules.rasterizer import RasterConfig  # noqa: E402
from modules.seqmodel import ModelConfig  # noqa: E402

# Janela de 20 m em 16 px: entrada direta da geometria tiny
TINY_RASTER = RasterConfig(lambda_m=10.0, px_per_m=0.8, out_px=16)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_raster():
    return TINY_RASTER


def tiny_model_config(rho: int = 2, tau: int = 4, iterations: int = 3, map_steps: str = "all") -> ModelConfig:
    return ModelConfig(rho=rho, tau=tau, routing_iterations=iterations, geometry="tiny",
                       map_steps=map_steps, raster=TINY_RASTER)


def make_samples(seed: int = 3, kinds=("straight", "curve", "intersection"), n_agents: int = 2,
                 rho: int = 2, tau: int = 4, raster_cfg: RasterConfig = TINY_RASTER, limit=None):
    """Amostras de alguns cenários gerados, com stats calculadas sobre elas mesmas"""
    scenarios = [(f"s{k}", *generate_scenario(seed + k, kind, n_agents)) for k, kind in enumerate(kinds)]
    rows = np.concatenate([window_state_rows(t, rho, tau) for _, _, tracks in scenarios for t in tracks])
    stats = compute_stats(rows)
    samples = []
    for sid, vmap, tracks in scenarios:
        for track in tracks:
            samples.extend(build_samples(vmap, track, rho, tau, stats, raster_cfg, sid))
    return (samples[:limit] if limit else samples), stats


def quantize_scenario(vector_map: VectorMap, tracks):
    """Coordenadas em múltiplos de 2^-10 para translações inteiras exatas"""
    def q(value):
        return np.round(np.asarray(value) * 1024.0) / 1024.0

    vmap = VectorMap({layer: tuple(q(p) for p in polys) for layer, polys in vector_map.layers.items()})
    quantized = []
    for track in tracks:
        states = tuple(AgentState(s.t, float(q(s.x)), float(q(s.y)), s.vx, s.vy, s.ax, s.ay, s.yaw)
                       for s in track.states)
        quantized.append(Track(track.agent_id, states, track.length_m, track.width_m))
    return vmap, quantized


def straight_track(n: int = 12, speed: float = 5.0, agent_id: str = "agent-00", yaw: float = 0.0) -> Track:
    c, s = np.cos(yaw), np.sin(yaw)
    states = tuple(AgentState(t=0.5 * k, x=speed * 0.5 * k * c, y=speed * 0.5 * k * s,
                              vx=speed * c, vy=speed * s, ax=0.0, ay=0.0, yaw=yaw) for k in range(n))
    return Track(agent_id, states, 4.5, 1.9)
