"""
Módulo de métricas do host.
Núcleos físicos (default de --threads) e um retrato de CPU/memória via psutil,
registrado no início do treinamento.
"""
import logging
from datetime import datetime

import psutil

logger = logging.getLogger(__name__)


def _format_bytes(b: int) -> str:
    """Formata bytes em GB com 1 casa decimal"""
    return f"{b / (1024 ** 3):.1f} GB"


def physical_cores() -> int:
    """Núcleos físicos (ou lógicos, se o SO não informar); mínimo 1"""
    return psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1


def get_host_snapshot() -> dict:
    """
    Retrato do host:
    - CPU: núcleos lógicos/físicos e load average
    - Memória: total, disponível, percentual
    """
    try:
        cpu_count = psutil.cpu_count(logical=True)
        mem = psutil.virtual_memory()
        try:
            load1, load5, load15 = psutil.getloadavg()
        except (AttributeError, OSError):
            load1 = load5 = load15 = 0.0

        return {
            "success": True,
            "timestamp": datetime.now().isoformat(timespec="seconds"),
            "cpu": {
                "cores_logical": cpu_count,
                "cores_physical": physical_cores(),
                "load_1": round(load1, 2),
                "load_5": round(load5, 2),
                "load_15": round(load15, 2),
            },
            "memory": {
                "total": _format_bytes(mem.total),
                "available": _format_bytes(mem.available),
                "percent": round(mem.percent, 1),
                "status": "critical" if mem.percent >= 90 else "warning" if mem.percent >= 75 else "ok",
            },
        }
    except Exception as e:
        logger.error(f"Erro ao coletar métricas do host: {e}")
        return {"success": False, "error": str(e), "timestamp": datetime.now().isoformat(timespec="seconds")}


def log_host_snapshot() -> dict:
    snapshot = get_host_snapshot()
    if snapshot["success"]:
        logger.info(
            f"Host: {snapshot['cpu']['cores_physical']} núcleos físicos / "
            f"{snapshot['cpu']['cores_logical']} lógicos, memória {snapshot['memory']['available']} "
            f"livres de {snapshot['memory']['total']} ({snapshot['memory']['status']})"
        )
    return snapshot
