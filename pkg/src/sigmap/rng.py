"""Deterministic 64-bit PRNG (splitmix64) used for all corpus randomness.

Every random decision in corpus generation, obfuscation, k-means seeding and
CP initialisation flows through this generator so that a master seed pins the
whole pipeline bit-exactly, independent of platform and worker count.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """The splitmix64 output scrambler (finalizer of Stafford's MurmurHash3 variant)."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-entry seed: mixes the master seed with a stream index.

    Used to hand each corpus sample (and each sub-stream inside a sample)
    an independent seed so entries can be generated concurrently without a
    shared generator.
    """
    return mix64((master_seed ^ ((index + 1) * _GAMMA)) & _MASK64)


class SplitMix64:
    """Sequential splitmix64 stream."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return mix64(self._state)

    def randrange(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is irrelevant at 64-bit state width."""
        if n <= 0:
            raise ValueError("randrange needs n > 0")
        return self.next_u64() % n

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order randomised."""
        if k > n:
            raise ValueError("cannot sample more indices than available")
        pool = list(range(n))
        self.shuffle(pool)
        return pool[:k]

    def rand_bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "little")
        return bytes(out[:n])
