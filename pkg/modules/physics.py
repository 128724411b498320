"""
Baselines físicos: velocidade constante e rumo (CV&H), aceleração constante e
rumo (CA&H), taxa de giro constante com velocidade (CTRV) ou aceleração
(CTRA), e o Physics Oracle (melhor membro contra a verdade de solo).

Todas as saídas são deslocamentos [tau, 2] relativos a p_t.
"""

import logging
import math
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from modules.mapmodel import DT, AgentState

logger = logging.getLogger(__name__)

# Abaixo disso CTRV/CTRA usam a forma reta
MIN_TURN_RATE = 1e-6

PHYSICS_MEMBERS = ("cvh", "cah", "ctrv", "ctra")


def _times(tau: int, dt: float) -> np.ndarray:
    return np.arange(1, tau + 1, dtype=np.float64) * dt


def turn_rate(previous: AgentState, last: AgentState, dt: float = DT) -> float:
    """ω = wrap(θ_t - θ_{t-1}) / Δt"""
    delta = math.atan2(math.sin(last.yaw - previous.yaw), math.cos(last.yaw - previous.yaw))
    return delta / dt


def rollout_cvh(state: AgentState, tau: int, dt: float = DT) -> np.ndarray:
    """Ŷ_j = j·Δt·v_t"""
    return _times(tau, dt)[:, None] * state.velocity[None, :]


def rollout_cah(state: AgentState, tau: int, dt: float = DT) -> np.ndarray:
    t = _times(tau, dt)[:, None]
    return t * state.velocity[None, :] + 0.5 * t * t * state.acceleration[None, :]


def rollout_ctra(state: AgentState, tau: int, omega: float, dt: float = DT,
                 with_acceleration: bool = True) -> np.ndarray:
    """Giro constante; aceleração longitudinal = projeção de a no rumo"""
    t = _times(tau, dt)
    speed = float(np.hypot(state.vx, state.vy))
    psi = state.yaw
    heading = np.array([math.cos(psi), math.sin(psi)])
    accel = float(state.acceleration @ heading) if with_acceleration else 0.0
    if abs(omega) < MIN_TURN_RATE:
        distance = speed * t + 0.5 * accel * t * t
        return distance[:, None] * heading[None, :]
    w = omega
    phase = psi + w * t
    x = ((speed + accel * t) * np.sin(phase) / w + accel * np.cos(phase) / w ** 2
         - speed * math.sin(psi) / w - accel * math.cos(psi) / w ** 2)
    y = ((-speed - accel * t) * np.cos(phase) / w + accel * np.sin(phase) / w ** 2
         + speed * math.cos(psi) / w - accel * math.sin(psi) / w ** 2)
    return np.stack([x, y], axis=1)


def rollout_ctrv(state: AgentState, tau: int, omega: float, dt: float = DT) -> np.ndarray:
    return rollout_ctra(state, tau, omega, dt, with_acceleration=False)


def _as_history(observed: Union[AgentState, Sequence[AgentState]]) -> Sequence[AgentState]:
    return (observed,) if isinstance(observed, AgentState) else observed


def physics_rollouts(observed: Union[AgentState, Sequence[AgentState]], tau: int,
                     dt: float = DT) -> Dict[str, np.ndarray]:
    """Rollouts de todos os membros, na ordem de PHYSICS_MEMBERS"""
    history = _as_history(observed)
    last = history[-1]
    omega = turn_rate(history[-2], last, dt) if len(history) >= 2 else 0.0
    return {
        "cvh": rollout_cvh(last, tau, dt),
        "cah": rollout_cah(last, tau, dt),
        "ctrv": rollout_ctrv(last, tau, omega, dt),
        "ctra": rollout_ctra(last, tau, omega, dt),
    }


def baseline_cvh(last: AgentState, tau: int) -> np.ndarray:
    return rollout_cvh(last, tau)


def physics_oracle(observed: Union[AgentState, Sequence[AgentState]], tau: int,
                   truth: np.ndarray) -> Tuple[str, np.ndarray]:
    """
    Membro com menor soma de erros L2 por passo contra a verdade de solo.

    Empates ficam com o primeiro membro (CV&H primeiro). Só para avaliação.
    """
    truth = np.asarray(truth, dtype=np.float64)
    best_name, best_rollout, best_error = None, None, math.inf
    for name, rollout in physics_rollouts(observed, tau).items():
        error = float(np.linalg.norm(rollout - truth, axis=1).sum())
        if error < best_error:
            best_name, best_rollout, best_error = name, rollout, error
    return best_name, best_rollout
