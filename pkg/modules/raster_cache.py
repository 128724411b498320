"""
Módulo de cache em memória das pilhas de camadas rasterizadas
"""

import logging
import threading
from collections import OrderedDict
from typing import Any, Dict, Hashable, Optional

logger = logging.getLogger(__name__)


class RasterCache:
    """Cache LRU limitado; chave = (conteúdo do mapa, pose e caixa do agente, RasterConfig)"""

    def __init__(self, max_items: int = 2000):
        self.max_items = max_items
        self.items: "OrderedDict[Hashable, Any]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        logger.debug(f"Cache de rasters inicializado (max_items={max_items})")

    def get(self, key: Hashable) -> Optional[Any]:
        """
        Obter pilha do cache

        Args:
            key: Chave (mapa, pose, caixa, configuração)

        Returns:
            Pilha armazenada ou None
        """
        with self._lock:
            if key in self.items:
                self.items.move_to_end(key)
                self.hits += 1
                return self.items[key]
            self.misses += 1
            return None

    def set(self, key: Hashable, data: Any) -> None:
        with self._lock:
            self.items[key] = data
            self.items.move_to_end(key)
            while len(self.items) > self.max_items:
                self.items.popitem(last=False)

    def clear(self) -> None:
        """Limpar todo o cache"""
        with self._lock:
            self.items.clear()
            self.hits = 0
            self.misses = 0
        logger.info("Cache de rasters limpo")

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            total = self.hits + self.misses
            return {
                "items": len(self.items),
                "hits": self.hits,
                "misses": self.misses,
                "hit_rate": round(self.hits / total, 4) if total else 0.0,
                "memory_usage_mb": self._estimate_memory_usage(),
            }

    def _estimate_memory_usage(self) -> float:
        total = sum(getattr(getattr(v, "layers", None), "nbytes", 0) for v in self.items.values())
        return round(total / (1024 * 1024), 2)


# Instância global do cache
_cache_instance: Optional[RasterCache] = None


def get_raster_cache() -> RasterCache:
    """Obter instância global do cache (singleton)"""
    global _cache_instance
    if _cache_instance is None:
        from modules.config import raster_cache_items
        _cache_instance = RasterCache(max_items=raster_cache_items())
    return _cache_instance
