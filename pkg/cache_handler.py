import hashlib
import json
import logging
import threading
from typing import Any, Callable, Dict, Tuple

from model import Instance, instance_to_dict

logger = logging.getLogger(__name__)


class ParameterCache:
    """
    Simple in-memory cache for reformulation parameters (SDP rho, recovered
    lift parameters, stage timings) so one bench sweep solves each SDP once.
    Entries are keyed by a content hash of the instance and the stage name.
    """
    def __init__(self):
        self.cache: Dict[Tuple[str, str], Any] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _generate_key(self, inst: Instance, stage: str) -> Tuple[str, str]:
        """Generate a cache key from the instance data."""
        payload = json.dumps(instance_to_dict(inst), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest(), stage

    def get(self, inst: Instance, stage: str):
        key = self._generate_key(inst, stage)
        with self._lock:
            if key in self.cache:
                self.hits += 1
                return self.cache[key]
            self.misses += 1
        return None

    def set(self, inst: Instance, stage: str, value: Any):
        key = self._generate_key(inst, stage)
        with self._lock:
            self.cache[key] = value

    def get_or_compute(self, inst: Instance, stage: str, compute: Callable[[], Any]):
        cached = self.get(inst, stage)
        if cached is not None:
            logger.debug(f"cache hit for stage '{stage}'")
            return cached
        value = compute()
        self.set(inst, stage, value)
        return value

    def clear(self):
        """Clear all cached parameters."""
        with self._lock:
            self.cache = {}

    def __len__(self) -> int:
        return len(self.cache)
