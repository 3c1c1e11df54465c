"""Randomness and time sources, injectable so seeded runs are reproducible.

The default sources are the OS CSPRNG and the wall clock. Seeded deployments
swap in ``SeededRng``/``CountingClock``, whose state round-trips through the
deployment config so separate CLI invocations continue the same stream.
"""

from __future__ import annotations

import hashlib
import secrets
import time


class SystemRng:
    """OS-backed CSPRNG; the default for real deployments."""

    deterministic = False

    def bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class SeededRng:
    """Counter-mode SHA-256 stream over a fixed seed.

    Not a hardened DRBG; used only for reproducible demo/test deployments
    where byte-identical runs matter more than entropy.
    """

    deterministic = True

    def __init__(self, seed: bytes, counter: int = 0):
        if len(seed) != 32:
            raise ValueError("seed must be 32 bytes")
        self.seed = seed
        self.counter = counter

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            block = hashlib.sha256(self.seed + self.counter.to_bytes(8, "big")).digest()
            self.counter += 1
            out.extend(block)
        return bytes(out[:n])


class SystemClock:
    deterministic = False

    def now(self) -> int:
        return int(time.time())


class CountingClock:
    """Monotone fake clock: each reading advances one second."""

    deterministic = True

    def __init__(self, value: int):
        self.value = value

    def now(self) -> int:
        self.value += 1
        return self.value
