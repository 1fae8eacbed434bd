"""Counter-based random streams keyed by (seed, node, step).

Each (node, step, lane) triple gets its own Philox stream, so draws for one
node never shift another node's samples and any single draw can be replayed
without re-running the rest of the pass.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


class CounterRng:
    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed)
        self._keys: dict[str, int] = {}

    def _key(self, label: str) -> int:
        k = self._keys.get(label)
        if k is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{label}".encode(), digest_size=16).digest()
            k = self._keys[label] = int.from_bytes(digest, "little")
        return k

    def stream(self, label: str, step: int, lane: int = 0) -> np.random.Generator:
        """Generator for ``label`` at ``step``; ``lane`` separates independent uses."""
        # step/lane sit above the low counter word, which Philox increments per block
        bitgen = np.random.Philox(key=self._key(label), counter=[0, step & MASK64, lane & MASK64, 0])
        return np.random.Generator(bitgen)

    def spawn(self, offset: int) -> "CounterRng":
        return CounterRng(self.seed + offset)
