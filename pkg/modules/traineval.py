"""
Perda J = α·MAE + β·MSE, agenda de taxa de aprendizado, laço de treinamento
com Adam e avaliação ADE/FDE nos horizontes de 1 a 6 s.
"""

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from modules.config import ConfigError
from modules.host_metrics import log_host_snapshot
from modules.mapmodel import DT, Sample, StandardizationStats
from modules.numcore import (
    AdamState, ShapeError, Tensor, absolute, adam_step, backward, square, sum_gradient_maps, tensor_mean,
)
from modules.physics import baseline_cvh, physics_oracle
from modules.seqmodel import Checkpoint, ModelConfig, PredictorParams, forward_batch
from modules.training_log import TrainingLog
from modules.worker_pool import get_pool_stats, run_ordered

logger = logging.getLogger(__name__)

HORIZONS_S = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    lr: float = 5e-4
    gamma: float = 0.1
    decay_epochs: Tuple[int, ...] = (5, 20)
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1
    selection_horizon_s: int = 4
    threads: int = 1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs deve ser estritamente crescente")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha/beta devem ser >= 0 e não ambos 0")
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1:
            raise ConfigError("epochs, batch_size e threads devem ser >= 1")
        if self.lr <= 0:
            raise ConfigError("lr deve ser > 0")


def loss(pred: Tensor, target, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """α·média|ŷ-y| + β·média(ŷ-y)² sobre todas as coordenadas"""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"loss: predição {pred.shape} != alvo {target.shape}")
    diff = pred - target
    return tensor_mean(absolute(diff)) * alpha + tensor_mean(square(diff)) * beta


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """lr·γ^k, k = número de épocas de decaimento já alcançadas (aritmética decimal)"""
    if epoch < 0:
        raise ValueError(f"epoch deve ser >= 0, recebeu {epoch}")
    k = sum(1 for e in config.decay_epochs if epoch >= e)
    return float(Decimal(repr(config.lr)) * Decimal(repr(config.gamma)) ** k)


def split_by_scenario(scenario_ids: Sequence[str], val_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """Divisão treino/validação por cenário (nunca por amostra)"""
    ids = sorted(set(scenario_ids))
    if not ids:
        raise ValueError("nenhum cenário para dividir")
    n_val = int(round(val_fraction * len(ids)))
    if val_fraction > 0 and len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


# ----------------------------------------------------------------------
# Métricas
# ----------------------------------------------------------------------

def ade_fde(pred: np.ndarray, truth: np.ndarray, horizons: Sequence[int] = HORIZONS_S,
            dt: float = DT) -> Dict[int, Tuple[float, float]]:
    """ADE(h) = média dos passos 1..h/Δt; FDE(h) = deslocamento no passo h/Δt"""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"ade_fde: predição {pred.shape} != verdade {truth.shape}")
    displacement = np.linalg.norm(pred - truth, axis=-1)
    row = {}
    for h in horizons:
        steps = int(round(h / dt))
        if steps > displacement.shape[0]:
            raise ValueError(f"horizonte {h}s requer {steps} passos; tau = {displacement.shape[0]}")
        row[h] = (float(displacement[:steps].mean()), float(displacement[steps - 1]))
    return row


@dataclass
class MetricsReport:
    model: str
    horizons: List[int]
    ade: Dict[int, float]
    fde: Dict[int, float]
    count: int
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "count": self.count,
            "horizons_s": list(self.horizons),
            "ade": {str(h): self.ade[h] for h in self.horizons},
            "fde": {str(h): self.fde[h] for h in self.horizons},
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        horizons = [int(h) for h in data["horizons_s"]]
        return cls(data["model"], horizons, {h: data["ade"][str(h)] for h in horizons},
                   {h: data["fde"][str(h)] for h in horizons}, data["count"], data.get("extra", {}))


Predictor = Callable[[Sequence[Sample]], np.ndarray]


def model_predictor(params: PredictorParams, config: ModelConfig) -> Predictor:
    def predict(samples: Sequence[Sample]) -> np.ndarray:
        return np.asarray(forward_batch(samples, params, config).data, dtype=np.float64)
    return predict


def cvh_predictor(tau: int) -> Predictor:
    def predict(samples: Sequence[Sample]) -> np.ndarray:
        return np.stack([baseline_cvh(s.last_state, tau) for s in samples])
    return predict


def _cell_errors(prediction: np.ndarray, truth: np.ndarray, horizons: Sequence[int]) -> np.ndarray:
    """[2, len(horizons)]: (ADE, FDE) por horizonte"""
    row = ade_fde(prediction, truth, horizons)
    return np.array([[row[h][0] for h in horizons], [row[h][1] for h in horizons]])


def evaluate(predictor: Union[str, Predictor], samples: Sequence[Sample], horizons: Sequence[int] = HORIZONS_S,
             model_id: Optional[str] = None, batch_size: int = 16, threads: int = 1) -> MetricsReport:
    """
    ADE/FDE médios sobre as amostras.

    predictor: callable (lote -> [B, tau, 2]), "cvh" ou "oracle". O oracle
    usa, por amostra, o rollout físico de menor erro L2 total no horizonte tau
    e o avalia em todas as células.
    """
    if not samples:
        raise ValueError("evaluate: conjunto vazio")
    horizons = list(horizons)
    tau = samples[0].target.shape[0]
    if predictor == "oracle":
        model_id = model_id or "Physics Oracle"
        per_sample = run_ordered(
            lambda s: _cell_errors(physics_oracle(s.observed, tau, s.target)[1], s.target, horizons),
            samples, threads)
    else:
        if predictor == "cvh":
            model_id = model_id or "Const. Vel. & Head."
            predictor = cvh_predictor(tau)
        model_id = model_id or "model"
        batches = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
        predictions = np.concatenate(run_ordered(predictor, batches, threads))
        per_sample = [_cell_errors(p, s.target, horizons) for p, s in zip(predictions, samples)]

    errors = np.stack(per_sample)                         # [N, 2, H]
    mean = errors.mean(axis=0)
    report = MetricsReport(
        model=model_id, horizons=horizons,
        ade={h: float(mean[0, i]) for i, h in enumerate(horizons)},
        fde={h: float(mean[1, i]) for i, h in enumerate(horizons)},
        count=len(samples),
    )
    logger.info(f"Avaliação {model_id}: {len(samples)} amostras, "
                + " ".join(f"{h}s={report.ade[h]:.2f}/{report.fde[h]:.2f}" for h in horizons))
    return report


# ----------------------------------------------------------------------
# Treinamento
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainingLog
    first_step_loss: float
    best_epoch: int


def _shard_step(shard: Sequence[Sample], params: PredictorParams, model_config: ModelConfig,
                config: TrainConfig, batch_size: int):
    """Perda do shard escalada por len(shard)/B; soma dos shards = perda média do lote"""
    pred = forward_batch(shard, params, model_config)
    target = np.stack([s.target for s in shard])
    value = loss(pred, target, config.alpha, config.beta) * (len(shard) / batch_size)
    return float(value.data), backward(value)


def _shards(batch: Sequence[Sample], threads: int) -> List[Sequence[Sample]]:
    count = min(threads, len(batch))
    bounds = np.linspace(0, len(batch), count + 1).astype(int)
    return [batch[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _snapshot(params: PredictorParams) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_tensors().items()}


def train(train_samples: Sequence[Sample], val_samples: Sequence[Sample], model_config: ModelConfig,
          config: TrainConfig, stats: StandardizationStats, params: Optional[PredictorParams] = None,
          log: Optional[TrainingLog] = None, progress: bool = False) -> TrainResult:
    """
    Adam com embaralhamento semeado; gradientes dos shards reduzidos em ordem fixa.

    Com validação, o checkpoint devolvido é o de menor ADE no horizonte de
    seleção; sem validação, o da última época.
    """
    if not train_samples:
        raise ValueError("train: conjunto de treino vazio")
    params = params or PredictorParams.init(model_config, seed=config.seed)
    log = log or TrainingLog()
    log_host_snapshot()
    logger.info(f"Treino: {len(train_samples)} amostras, {len(val_samples or [])} de validação, "
                f"{params.parameter_count():,} parâmetros, {config.threads} threads")
    named = params.named_tensors()
    adam = AdamState()
    rng = np.random.default_rng(config.seed)
    samples = list(train_samples)
    first_step_loss = None
    best_score, best_epoch, best_params = np.inf, -1, None

    epochs = tqdm(range(config.epochs), desc="treino", unit="época", disable=not progress)
    for epoch in epochs:
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(samples))
        total, seen = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            results = run_ordered(
                lambda shard: _shard_step(shard, params, model_config, config, len(batch)),
                _shards(batch, config.threads), config.threads)
            batch_loss = sum(r[0] for r in results)
            if first_step_loss is None:
                first_step_loss = batch_loss
            adam_step(named, sum_gradient_maps(r[1] for r in results), adam, lr)
            total += batch_loss * len(batch)
            seen += len(batch)
        train_loss = total / seen

        val_loss = val_ade = None
        if val_samples:
            val_loss = validation_loss(val_samples, params, model_config, config)
            report = evaluate(model_predictor(params, model_config), val_samples,
                              horizons=[config.selection_horizon_s], model_id="val",
                              batch_size=config.batch_size, threads=config.threads)
            val_ade = report.ade[config.selection_horizon_s]
        score = val_ade if val_ade is not None else -epoch
        if np.isnan(score):
            score = np.inf
        # a primeira época sempre entra como ponto de partida
        is_best = best_params is None or score < best_score
        if is_best:
            best_score, best_epoch, best_params = score, epoch, _snapshot(params)
        log.record(epoch, lr, train_loss, val_loss, val_ade, best=is_best)
        epochs.set_postfix(loss=f"{train_loss:.4f}")

    for name, data in best_params.items():
        named[name].data = data
    logger.info(f"Treino concluído: melhor época {best_epoch}, pool {get_pool_stats()}")
    checkpoint = Checkpoint(model_config, stats, params, training=log.summary())
    return TrainResult(checkpoint, log, first_step_loss, best_epoch)


def validation_loss(samples: Sequence[Sample], params: PredictorParams, model_config: ModelConfig,
                    config: TrainConfig) -> float:
    total = 0.0
    for start in range(0, len(samples), config.batch_size):
        batch = samples[start:start + config.batch_size]
        pred = forward_batch(batch, params, model_config)
        target = np.stack([s.target for s in batch])
        total += float(loss(pred, target, config.alpha, config.beta).data) * len(batch)
    return total / len(samples)
