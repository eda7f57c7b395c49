"""Token-bucket pacing for convergence-layer writes."""

from __future__ import annotations

import threading
import time


class TokenBucket:
    """Blocks callers so that bytes leave at no more than ``rate`` bytes/s.

    ``burst`` is the bucket depth in bytes. With ``burst=0`` (the default) the
    bucket never stores credit, so every write of ``n`` bytes is charged the
    full ``n / rate`` seconds even after an idle period.
    """

    def __init__(self, rate: float, burst: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.burst = float(burst)
        self._clock = clock
        self._sleep = sleep
        self._tokens = 0.0
        self._last = clock()
        self._lock = threading.Lock()

    def reserve(self, n: int) -> float:
        """Charge ``n`` bytes and return how long the caller must wait."""
        with self._lock:
            now = self._clock()
            self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
            self._last = now
            self._tokens -= n
            return 0.0 if self._tokens >= 0 else -self._tokens / self.rate

    def consume(self, n: int) -> None:
        delay = self.reserve(n)
        if delay > 0:
            self._sleep(delay)


def shape_bandwidth(limit: float | None, burst_bytes: float = 0.0) -> TokenBucket | None:
    """Pacing policy for a link limited to ``limit`` bits/s; ``None`` disables pacing."""
    if limit is None or limit == 0:
        return None
    if limit < 0:
        raise ValueError("bandwidth limit must be positive")
    return TokenBucket(limit / 8.0, burst_bytes)


def transfer_floor(payload_bytes: int, limit: float, hops: int = 1) -> float:
    """Lower bound in seconds for a store-and-forward transfer over ``hops`` paced links."""
    return hops * payload_bytes * 8 / limit
