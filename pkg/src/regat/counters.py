"""Work counters exposing the engine's cost model.

Embedding n videos costs exactly n encoder passes; answering q queries over
d database videos costs exactly q*d similarity evaluations and zero encoder
passes. Tests and the CLI read these to verify that pairwise work only ever
happens at the cheap similarity stage.
"""

from __future__ import annotations

import threading


class Counter:
    """Thread-safe monotonic counter with reset."""

    def __init__(self, name: str):
        self.name = name
        self._lock = threading.Lock()
        self._value = 0

    @property
    def value(self) -> int:
        with self._lock:
            return self._value

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._value += n

    def reset(self) -> None:
        with self._lock:
            self._value = 0


# One encoder pass per embed_video call (so per shot in shot mode).
encoder_passes = Counter("encoder_passes")

# One per (query, candidate) similarity or shot-aggregation evaluation.
similarity_evals = Counter("similarity_evals")


def reset_all() -> None:
    encoder_passes.reset()
    similarity_evals.reset()
