"""
Módulo de configurações centralizadas
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv


class ConfigError(ValueError):
    """Configuração inválida ou incompatível (a mensagem nomeia o campo)"""


def setup_logging(level: Optional[str] = None):
    """Configurar sistema de logging"""
    level = (level or os.getenv("CAPSMAP_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    return logging.getLogger(__name__)


def load_environment():
    """Carregar variáveis de ambiente"""
    load_dotenv()


def default_threads() -> int:
    """Número de workers: CAPSMAP_THREADS ou núcleos físicos do host"""
    env = os.getenv("CAPSMAP_THREADS", "")
    if env.strip():
        return max(1, int(env))
    from modules.host_metrics import physical_cores
    return physical_cores()


def raster_cache_items() -> int:
    """Capacidade do cache de rasters: CAPSMAP_RASTER_CACHE_ITEMS (padrão 2000 pilhas, ~160 MB a 64 px)"""
    env = os.getenv("CAPSMAP_RASTER_CACHE_ITEMS", "")
    return max(1, int(env)) if env.strip() else 2000


# Rasterização (λ em metros, resolução, tamanho final)
RASTER_DEFAULTS = {
    "lambda_m": 10.0,
    "px_per_m": 3.0,
    "out_px": 64,
}

# Modelo
MODEL_DEFAULTS = {
    "rho": 5,                 # passo atual + 4 passados (2 s a 2 Hz)
    "tau": 12,                # 6 s a 2 Hz
    "routing_iterations": 3,
    "geometry": "full",       # full | tiny
    "map_steps": "all",       # all | last
}

# Treinamento
TRAIN_DEFAULTS = {
    "epochs": 70,
    "lr": 5e-4,
    "gamma": 0.1,
    "decay_epochs": [5, 20],
    "alpha": 1.0,
    "beta": 1.0,
    "batch_size": 8,
    "val_fraction": 0.1,
    "selection_horizon_s": 4,
}

# Geração de cenários sintéticos
SCENARIO_DEFAULTS = {
    "kinds": ["straight", "curve", "intersection"],
    "n_agents": 3,
    "track_steps": 24,
}

LAYER_ORDER = ["drivable_area", "road_segment", "lane", "walkway", "agent_box"]


@dataclass
class RunConfig:
    """Todos os parâmetros de uma execução; serializável em JSON"""

    lambda_m: float = RASTER_DEFAULTS["lambda_m"]
    px_per_m: float = RASTER_DEFAULTS["px_per_m"]
    out_px: int = RASTER_DEFAULTS["out_px"]
    rho: int = MODEL_DEFAULTS["rho"]
    tau: int = MODEL_DEFAULTS["tau"]
    routing_iterations: int = MODEL_DEFAULTS["routing_iterations"]
    geometry: str = MODEL_DEFAULTS["geometry"]
    map_steps: str = MODEL_DEFAULTS["map_steps"]
    epochs: int = TRAIN_DEFAULTS["epochs"]
    lr: float = TRAIN_DEFAULTS["lr"]
    gamma: float = TRAIN_DEFAULTS["gamma"]
    decay_epochs: List[int] = field(default_factory=lambda: list(TRAIN_DEFAULTS["decay_epochs"]))
    alpha: float = TRAIN_DEFAULTS["alpha"]
    beta: float = TRAIN_DEFAULTS["beta"]
    batch_size: int = TRAIN_DEFAULTS["batch_size"]
    val_fraction: float = TRAIN_DEFAULTS["val_fraction"]
    selection_horizon_s: int = TRAIN_DEFAULTS["selection_horizon_s"]
    layer_order: List[str] = field(default_factory=lambda: list(LAYER_ORDER))
    seed: int = 0
    drop_out_of_map: bool = True
    threads: int = 1

    def validate(self) -> "RunConfig":
        """Validar invariantes; ConfigError nomeia o campo inválido"""
        if self.lambda_m <= 0:
            raise ConfigError("lambda_m deve ser > 0")
        if self.px_per_m <= 0:
            raise ConfigError("px_per_m deve ser > 0")
        if self.out_px < 1:
            raise ConfigError("out_px deve ser >= 1")
        if self.rho < 1:
            raise ConfigError("rho deve ser >= 1")
        if self.tau < 1:
            raise ConfigError("tau deve ser >= 1")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations deve ser >= 1")
        if self.geometry not in ("full", "tiny"):
            raise ConfigError(f"geometry desconhecida: {self.geometry}")
        if self.map_steps not in ("all", "last"):
            raise ConfigError(f"map_steps desconhecido: {self.map_steps}")
        if self.epochs < 1:
            raise ConfigError("epochs deve ser >= 1")
        if self.lr <= 0:
            raise ConfigError("lr deve ser > 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs deve ser estritamente crescente")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha/beta devem ser >= 0 e não ambos 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size deve ser >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction deve estar em [0, 1)")
        if not 1 <= self.selection_horizon_s <= 6:
            raise ConfigError("selection_horizon_s deve estar em 1..6")
        if self.tau < 2 * self.selection_horizon_s:
            raise ConfigError(f"selection_horizon_s={self.selection_horizon_s} s exige tau >= "
                              f"{2 * self.selection_horizon_s} (2 Hz), tau={self.tau}")
        if self.layer_order != LAYER_ORDER:
            raise ConfigError(f"layer_order deve ser {LAYER_ORDER}")
        if self.threads < 1:
            raise ConfigError("threads deve ser >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"campo(s) desconhecido(s) na configuração: {', '.join(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        """Ler configuração JSON e mesclar sobre os defaults"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: JSON inválido na linha {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: a configuração deve ser um objeto JSON")
        return cls.from_dict(data)

    def raster_config(self):
        from modules.rasterizer import RasterConfig
        return RasterConfig(lambda_m=self.lambda_m, px_per_m=self.px_per_m, out_px=self.out_px)

    def train_config(self):
        from modules.traineval import TrainConfig
        return TrainConfig(
            epochs=self.epochs, lr=self.lr, gamma=self.gamma,
            decay_epochs=tuple(self.decay_epochs), alpha=self.alpha, beta=self.beta,
            batch_size=self.batch_size, seed=self.seed, val_fraction=self.val_fraction,
            selection_horizon_s=self.selection_horizon_s, threads=self.threads,
        )

    def model_config(self):
        from modules.seqmodel import ModelConfig
        return ModelConfig(
            rho=self.rho, tau=self.tau, routing_iterations=self.routing_iterations,
            geometry=self.geometry, map_steps=self.map_steps, raster=self.raster_config(),
        )
