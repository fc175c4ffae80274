"""Portable 64-bit PRNGs: splitmix64 and xoshiro256**.

Every random draw in the package goes through these generators so that a
reimplementation in another language can reproduce datasets and schedules
bit for bit.  Conventions (all arithmetic mod 2**64):

* ``splitmix64``: state += 0x9E3779B97F4A7C15, then the standard mix
  (xor-shift 30 / mul 0xBF58476D1CE4E5B9 / xor-shift 27 /
  mul 0x94D049BB133111EB / xor-shift 31).
* ``Xoshiro256ss(seed)``: the four state words are the first four outputs
  of ``splitmix64`` started at ``seed``.
* ``random()`` = ``(next_u64() >> 11) * 2**-53``, in [0, 1).
* ``integers(lo, hi)`` draws from [lo, hi) by rejection on the top bits
  (no modulo bias).
* ``normal()`` is Box-Muller: u1 = 1 - random(), u2 = random(),
  z = sqrt(-2 ln u1) * cos(2 pi u2).  One output word pair per normal.
* ``XoshiroLanes(seed, lanes)``: ``lanes`` independent xoshiro256**
  streams; lane i takes splitmix64 outputs 4i..4i+3 from ``seed``.  One
  call to ``next_u64`` advances every lane once and returns the outputs in
  lane order; bulk draws concatenate these blocks step by step.
* ``derive_seed(seed, tag)`` = splitmix64 output of ``seed ^ fnv1a64(tag)``.
"""

from __future__ import annotations

import math
from typing import MutableSequence, Sequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)

T = TypeVar("T")


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Sub-seed for a named role, e.g. ``derive_seed(7, "split/3")``."""
    return splitmix64((int(seed) ^ fnv1a64(tag)) & MASK64)[1]


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256ss:
    """Scalar xoshiro256** generator."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self.s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        if span == 1:
            return low
        bits = (span - 1).bit_length()
        while True:
            v = self.next_u64() >> (64 - bits)
            if v < span:
                return low + v

    def normal(self, mean: float = 0.0, sigma: float = 1.0) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mean + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates, walking from the end."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def choice_index(self, n: int) -> int:
        return self.integers(0, n)

    def pick(self, items: Sequence[T]) -> T:
        return items[self.integers(0, len(items))]


class XoshiroLanes:
    """Many xoshiro256** streams advanced together with numpy uint64 math."""

    def __init__(self, seed: int, lanes: int = 1024):
        if lanes < 1:
            raise ValueError("lanes must be positive")
        self.lanes = lanes
        s = int(seed) & MASK64
        words = np.empty((lanes, 4), dtype=np.uint64)
        for i in range(lanes):
            for j in range(4):
                s, out = splitmix64(s)
                words[i, j] = out
        self._s = [words[:, j].copy() for j in range(4)]

    @staticmethod
    def _rotl(x: np.ndarray, k: int) -> np.ndarray:
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    def next_u64(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = self._rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = self._rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def u64(self, n: int) -> np.ndarray:
        steps = -(-n // self.lanes)
        blocks = [self.next_u64() for _ in range(steps)]
        if not blocks:
            return np.empty(0, dtype=np.uint64)
        return np.concatenate(blocks)[:n]

    def random(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals from 2n words: even positions feed u1, odd feed u2."""
        u = self.random(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
