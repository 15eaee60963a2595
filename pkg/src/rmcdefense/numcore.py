"""Numerical substrate: lp norms and the splitmix64 random stream.

Tensors are plain float64 numpy arrays. Every stochastic step in the package
draws from an :class:`RngStream` so runs replay bit-identically from a seed.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

NORMS = ("linf", "l2", "l1")
_NORM_ALIASES = {
    "linf": "linf", "inf": "linf", "l∞": "linf", "li": "linf",
    "l2": "l2", "2": "l2",
    "l1": "l1", "1": "l1",
}


def parse_norm(p) -> str:
    """Normalize a norm tag (``1``, ``2``, ``inf``, ``"l1"``, ``"linf"``...) to
    one of ``"linf"``, ``"l2"``, ``"l1"``."""
    if isinstance(p, (int, float, np.integer, np.floating)) and not isinstance(p, bool):
        if p == 1:
            return "l1"
        if p == 2:
            return "l2"
        if math.isinf(p) and p > 0:
            return "linf"
        raise UsageError(f"unknown norm: {p!r}")
    if isinstance(p, str):
        key = p.strip().lower()
        if key in _NORM_ALIASES:
            return _NORM_ALIASES[key]
    raise UsageError(f"unknown norm: {p!r} (expected one of linf, l2, l1)")


def as_tensor(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains NaN or Inf")
    return arr


def lp_norm(v, p) -> float:
    """lp norm of a whole tensor, flattened."""
    p = parse_norm(p)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise UsageError("lp_norm of an empty tensor")
    if p == "l1":
        return float(np.sum(np.abs(v)))
    if p == "l2":
        return math.hypot(*v)  # scale-safe, no underflow in the squares
    return float(np.max(np.abs(v)))


def row_norms(v: np.ndarray, p: str) -> np.ndarray:
    """Per-sample lp norms over the last axis."""
    if p == "l1":
        return np.sum(np.abs(v), axis=-1)
    if p == "l2":
        return np.sqrt(np.sum(v * v, axis=-1))
    return np.max(np.abs(v), axis=-1)


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class RngStream:
    """splitmix64 generator.

    ``next_u64`` advances the state by the golden gamma and returns the mixed
    state; ``uniform`` maps the top 53 bits onto [0, 1).
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def derived(cls, master_seed: int, task_index: int) -> "RngStream":
        """Private stream for one task: state = mix(master_seed XOR task_index)."""
        return cls(splitmix64_mix((int(master_seed) ^ int(task_index)) & MASK64))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) / 9007199254740992.0

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def normals(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller, two uniforms per draw."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            u1 = 1.0 - self.uniform()  # (0, 1]
            u2 = self.uniform()
            out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = int(self.uniform() * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)


def rng_uniform(stream: RngStream) -> float:
    return stream.uniform()
