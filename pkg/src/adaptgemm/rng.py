"""Seeded 64-bit splitmix PRNG used for every random choice in the toolkit.

Implemented here (rather than via random/numpy) so that shuffles and samples
are byte-stable across Python and numpy versions; seeds recorded in output
files replay exactly.
"""

_MASK = (1 << 64) - 1


class SplitMix64:
    """Deterministic stream of 64-bit values from one seed."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) without modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK - (_MASK % bound) if bound & (bound - 1) else _MASK
        while True:
            v = self.next_u64()
            if bound & (bound - 1) == 0:
                return v & (bound - 1)
            if v <= limit:
                return v % bound


def shuffled(n: int, seed: int) -> list[int]:
    """Fisher-Yates permutation of range(n), fully determined by seed."""
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def sample_without_replacement(n: int, k: int, seed: int) -> list[int]:
    """First k indices of a seeded partial Fisher-Yates over range(n)."""
    if k > n:
        raise ValueError(f"cannot sample {k} from {n}")
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]


def mix(*values: int) -> int:
    """Fold several integers into one 64-bit seed."""
    acc = 0x9E3779B97F4A7C15
    for v in values:
        acc = SplitMix64(acc ^ (v & _MASK)).next_u64()
    return acc
