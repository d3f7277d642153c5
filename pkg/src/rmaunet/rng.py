"""SplitMix64 PRNG: a tiny, documented generator for cross-platform reproducibility.

Dataset splits and augmentation draws must replay identically on any
platform/library version, so they cannot depend on numpy's or python's
stdlib generator internals. SplitMix64 is fully specified by the constants
below (Steele et al., "Fast splittable pseudorandom number generators").
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit PRNG; one addition and three xor-shift-multiply rounds per draw."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return (z ^ (z >> 31)) & MASK64

    def next_float(self) -> float:
        # 53 high bits -> uniform in [0, 1)
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n); rejection sampling avoids modulo bias."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, high index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(*parts) -> int:
    """Mix ints/strings into one 64-bit seed; order-sensitive."""
    acc = 0x243F6A8885A308D3  # pi fraction, arbitrary nonzero start
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            for b in data:
                acc = SplitMix64((acc ^ b) & MASK64).next_u64()
        else:
            acc = SplitMix64((acc ^ (int(part) & MASK64)) & MASK64).next_u64()
    return acc
