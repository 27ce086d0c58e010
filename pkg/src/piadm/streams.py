"""Counter-based normal streams.

Every random quantity used by the samplers is addressed by a tag
(``"init"``, ``"sde"``, ``"momentum"``, ``"corrector"``), a tuple of integer
indices (block number, corrector block number) and a sample row.  Draws for a
row range do not depend on how the sample population is chunked, which is what
makes results independent of the thread count.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

_TAGS = {"init": 1, "sde": 2, "momentum": 3, "corrector": 4, "perturbation": 5, "aux": 6}
_WORDS_PER_COUNTER = 4
_HALF_ULP = 2.0 ** -54


def _key(seed: int, tag: str, indices: tuple[int, ...]) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_TAGS[tag], *map(int, indices)))
    return ss.generate_state(2, dtype=np.uint64)


class NormalStream:
    """Standard normals for rows ``[start, stop)`` of a fixed per-row shape."""

    def __init__(self, seed: int, tag: str, *indices: int):
        if tag not in _TAGS:
            raise ValueError(f"unknown stream tag {tag!r}")
        self.seed = int(seed)
        self.tag = tag
        self.indices = tuple(int(i) for i in indices)
        self._key = _key(self.seed, tag, self.indices)

    def draw(self, start: int, stop: int, shape: tuple[int, ...]) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        per_row = int(np.prod(shape)) if shape else 1
        rows = int(stop) - int(start)
        if rows < 0:
            raise ValueError("stop must be >= start")
        stride = max(1, math.ceil(per_row / _WORDS_PER_COUNTER))
        bg = np.random.Philox(key=self._key)
        bg.advance(int(start) * stride)
        u = np.random.Generator(bg).random((rows, stride * _WORDS_PER_COUNTER))
        z = ndtri(u[:, :per_row] + _HALF_ULP)
        return z.reshape((rows,) + shape)


def uniform_direction(seed: int, t: float, dim: int) -> np.ndarray:
    """Deterministic unit vector keyed by ``seed`` and the bit pattern of ``t``."""
    bits = np.array([t], dtype=np.float64).view(np.uint64)[0]
    hi, lo = int(bits >> np.uint64(32)), int(bits & np.uint64(0xFFFFFFFF))
    z = NormalStream(seed, "perturbation", hi, lo).draw(0, 1, (dim,))[0]
    norm = np.linalg.norm(z)
    if norm == 0.0:
        z = np.zeros(dim)
        z[0] = 1.0
        return z
    return z / norm
