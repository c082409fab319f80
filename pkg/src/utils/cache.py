"""
Caching utilities for the quantization toolkit.
"""

import hashlib
import json
import logging
import threading
from typing import Any, Callable, Dict, Optional

from cachetools import LRUCache

logger = logging.getLogger(__name__)


class ScaleCache:
    """
    LRU cache for quantization scales keyed by (layer, format, role).

    Scales depend only on the tensor and the format, so the selector computes
    each of them once no matter how many metrics or candidates reuse them.
    """

    def __init__(self, max_size: int = 4096):
        """
        Initialize cache.

        Args:
            max_size: Maximum number of entries in cache
        """
        self.max_size = max_size
        self._cache: LRUCache = LRUCache(maxsize=max_size)
        # LRUCache reorders on every read; workers share one cache
        self._lock = threading.Lock()
        self._stats = {
            "hits": 0,
            "misses": 0,
            "sets": 0,
        }
        logger.info(f"Initialized scale cache with max_size={max_size}")

    def _generate_key(self, prefix: str, **kwargs) -> str:
        """
        Generate cache key from prefix and arguments.

        Args:
            prefix: Key prefix
            **kwargs: Key components

        Returns:
            Cache key string
        """
        # Sort kwargs for consistent key generation
        key_data = json.dumps(sorted(kwargs.items()), sort_keys=True, default=str)
        key_hash = hashlib.md5(key_data.encode()).hexdigest()
        return f"{prefix}:{key_hash}"

    def get(self, key: str) -> Optional[Any]:
        with self._lock:
            value = self._cache.get(key)
            if value is not None:
                self._stats["hits"] += 1
            else:
                self._stats["misses"] += 1
        if value is not None:
            logger.debug(f"Cache hit: {key}")
            return value
        logger.debug(f"Cache miss: {key}")
        return None

    def set(self, key: str, value: Any) -> None:
        with self._lock:
            self._cache[key] = value
            self._stats["sets"] += 1

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        """
        Return the cached value for ``key``, computing and storing it on a miss.

        Args:
            key: Cache key
            compute: Zero-argument producer

        Returns:
            Cached or freshly computed value
        """
        value = self.get(key)
        if value is None:
            value = compute()
            self.set(key, value)
        return value

    def clear(self) -> None:
        """Clear all cache entries."""
        with self._lock:
            self._cache.clear()
        logger.info("Scale cache cleared")

    def get_stats(self) -> Dict[str, Any]:
        """
        Get cache statistics.

        Returns:
            Dictionary with cache stats
        """
        total_requests = self._stats["hits"] + self._stats["misses"]
        hit_rate = (self._stats["hits"] / total_requests * 100) if total_requests > 0 else 0

        return {
            **self._stats,
            "size": len(self._cache),
            "max_size": self.max_size,
            "hit_rate": round(hit_rate, 2),
            "total_requests": total_requests,
        }
