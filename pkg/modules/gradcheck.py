"""
Oráculo de diferenças finitas centrais para os gradientes do numcore
"""

import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from modules.numcore import Tensor, backward

logger = logging.getLogger(__name__)


def numeric_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, coords: Sequence[int],
                     step: float = 1e-6) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h nas coordenadas planas indicadas; h = step·max(1, |x_i|)"""
    flat = tensor.data.reshape(-1)
    estimates = np.zeros(len(coords), dtype=np.float64)
    for n, i in enumerate(coords):
        original = flat[i]
        h = step * max(1.0, abs(float(original)))
        flat[i] = original + h
        plus = float(loss_fn().data)
        flat[i] = original - h
        minus = float(loss_fn().data)
        flat[i] = original
        estimates[n] = (plus - minus) / (2.0 * h)
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / scale) if scale > 1e-12 else float(diff)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    step: float = 1e-6, max_coords: Optional[int] = None,
                    seed: int = 0) -> Dict[str, float]:
    """
    Comparar backward com diferenças centrais.

    loss_fn reconstrói o grafo a cada chamada lendo tensor.data; retorna o
    erro relativo por tensor (chave = nome ou índice).
    """
    rng = np.random.default_rng(seed)
    grads = backward(loss_fn())
    errors = {}
    for k, tensor in enumerate(tensors):
        key = tensor.name or str(k)
        coords = np.arange(tensor.size)
        if max_coords is not None and tensor.size > max_coords:
            coords = np.sort(rng.choice(tensor.size, size=max_coords, replace=False))
        analytic = grads.get(tensor, np.zeros_like(tensor.data)).reshape(-1)[coords]
        numeric = numeric_gradient(loss_fn, tensor, coords, step)
        errors[key] = relative_error(analytic, numeric)
        logger.debug(f"gradcheck {key}: erro relativo {errors[key]:.3e}")
    return errors
