"""Per-client token-bucket bandwidth shaping for the backend's transfers.

Each (function, client) pair gets its own bucket at rate
``rate_limit_bps / len(clients)``. Buckets start empty and hold at most one
second of tokens, so a saturating client's sustained throughput converges on
its share instead of front-loading a free burst.
"""

from __future__ import annotations

import asyncio
import time


class TokenBucket:
    """Byte-denominated token bucket; acquire() suspends until granted.

    Acquisitions are serialized per bucket (FIFO via the internal lock), and
    requests larger than the bucket capacity drain it in capacity-sized
    slices, so arbitrarily large transfers pace at the configured rate.
    """

    def __init__(self, rate_bytes_per_s: float, burst_s: float = 1.0,
                 clock=time.monotonic):
        if rate_bytes_per_s <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bytes_per_s)
        self.capacity = self.rate * burst_s
        self._tokens = 0.0
        self._clock = clock
        self._last = clock()
        self._lock = asyncio.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
        self._last = now

    async def acquire(self, n_bytes: int) -> None:
        if n_bytes <= 0:
            return
        async with self._lock:
            remaining = float(n_bytes)
            while remaining > 0:
                self._refill()
                take = min(self._tokens, remaining)
                self._tokens -= take
                remaining -= take
                if remaining > 0:
                    deficit = min(remaining, self.capacity) - self._tokens
                    await asyncio.sleep(max(deficit / self.rate, 0.001))


class RateLimiterSet:
    """Buckets keyed by (function, client), rebuilt lazily on config reload."""

    def __init__(self):
        self._buckets: dict[tuple[str, str], TokenBucket] = {}
        self._shares: dict[tuple[str, str], float] = {}

    def configure(self, function: str, clients: list[str], rate_limit_bps: int) -> None:
        share = rate_limit_bps / 8 / max(len(clients), 1)
        for client in clients:
            key = (function, client)
            if self._shares.get(key) != share:
                self._shares[key] = share
                self._buckets[key] = TokenBucket(share)

    async def acquire(self, function: str, client: str, n_bytes: int) -> None:
        bucket = self._buckets.get((function, client))
        if bucket is None:
            raise KeyError(f"no rate limiter configured for {function}/{client}")
        await bucket.acquire(n_bytes)

    def share_bytes_per_s(self, function: str, client: str) -> float:
        return self._shares[(function, client)]
