"""Deterministic random number generation.

The generator is xoshiro256** seeded through splitmix64, both implemented
from their published reference constants, so streams are identical across
platforms and library versions. Normal variates come from Box-Muller on the
raw uniform stream. Sub-streams are derived by hashing string/int tags with
BLAKE2b so unrelated parts of a pipeline cannot perturb each other's draws.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Sequence, TypeVar

import numpy as np

_MASK = (1 << 64) - 1

T = TypeVar("T")


def derive_seed(*parts: int | str) -> int:
    """Map a tag tuple to a stable 64-bit sub-seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with uniform/normal/integer helpers."""

    __slots__ = ("_s", "_gauss_spare")

    def __init__(self, seed: int):
        # splitmix64 expands the seed into the four state words.
        s = seed & _MASK
        state = []
        for _ in range(4):
            s = (s + 0x9E3779B97F4A7C15) & _MASK
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
            state.append(z ^ (z >> 31))
        self._s = state
        self._gauss_spare: float | None = None

    def spawn(self, *tags: int | str) -> "Rng":
        """Independent child stream identified by tags."""
        return Rng(derive_seed(*self._s, *tags))

    # -- state (for checkpointing) --------------------------------------

    def get_state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)  # type: ignore[return-value]

    def set_state(self, state: Sequence[int]) -> None:
        if len(state) != 4:
            raise ValueError("xoshiro256** state has exactly 4 words")
        self._s = [int(w) & _MASK for w in state]
        self._gauss_spare = None

    # -- raw stream ------------------------------------------------------

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    # -- distributions ---------------------------------------------------

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller (pairs cached)."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        # 1-u keeps the log argument in (0, 1].
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normal_array(self, shape: int | tuple[int, ...], std: float = 1.0) -> np.ndarray:
        if isinstance(shape, int):
            shape = (shape,)
        n = 1
        for d in shape:
            n *= d
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        if std != 1.0:
            out *= std
        return out.reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def random_round(self, p: float) -> bool:
        """Bernoulli draw with success probability p."""
        return self.uniform() < p

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items: Sequence[T]) -> T:
        if not items:
            raise ValueError("choice from empty sequence")
        return items[self.randint(len(items))]

    def sample(self, items: Iterable[T], k: int) -> list[T]:
        """k distinct items, order randomized (partial Fisher-Yates)."""
        pool = list(items)
        if k > len(pool):
            raise ValueError(f"cannot sample {k} from {len(pool)} items")
        for i in range(k):
            j = i + self.randint(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
