"""
Pool de workers limitado por --threads, com resultados na ordem de entrada
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Sequence, TypeVar

from modules.numcore import default_dtype, get_default_dtype

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Estatísticas acumuladas do pool
_pool_stats = {
    "runs": 0,
    "tasks": 0,
    "parallel_runs": 0,
}


def get_pool_stats() -> Dict:
    """Obter estatísticas do pool"""
    return _pool_stats.copy()


def run_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """
    Aplicar fn a cada item com até `threads` workers.

    A saída segue a ordem de items; a precisão padrão do numcore da thread
    chamadora é propagada para os workers.
    """
    items = list(items)
    _pool_stats["runs"] += 1
    _pool_stats["tasks"] += len(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    dtype = get_default_dtype()

    def task(item):
        with default_dtype(dtype):
            return fn(item)

    _pool_stats["parallel_runs"] += 1
    workers = min(threads, len(items))
    logger.debug(f"run_ordered: {len(items)} tarefas em {workers} workers")
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="capsmap") as executor:
        return list(executor.map(task, items))
