"""Deterministic, splittable random number generation.

The generator is counter-based: output word ``i`` of the stream keyed by ``k``
is ``mix64(k + (i + 1) * GOLDEN)`` where ``mix64`` is the SplitMix64 finalizer.
Splitting derives a child key by folding a tag into the parent key, so
independent substreams are addressed by path instead of by shared mutable
state. Everything is integer arithmetic on uint64, which makes sequences
bit-identical across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix64(np.asarray([x & _MASK], dtype=np.uint64))[0])


class Rng:
    """Splittable counter-based generator over a SplitMix64 stream."""

    def __init__(self, seed: int):
        self._key = seed & _MASK
        self._count = 0

    def split(self, tag: int | str) -> "Rng":
        """Derive an independent child stream addressed by ``tag``."""
        if isinstance(tag, str):
            t = 0
            for ch in tag.encode("utf-8"):
                t = _mix_int((t * 0x100 + ch) ^ _GOLDEN)
        else:
            t = int(tag)
        return Rng(_mix_int(self._key ^ _mix_int(t + _GOLDEN)))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _mix64(np.uint64(self._key) + idx * np.uint64(_GOLDEN))

    def uniform(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Uniform floats in [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        out = u.astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), std=1.0, dtype=np.float32) -> np.ndarray:
        """Standard-normal deviates via Box-Muller on the uniform stream."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # offset by half an ulp so log() never sees 0
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = (z * std).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound). Modulo bias is negligible for bound << 2^64."""
        return (self._raw(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), driven by this stream."""
        out = np.arange(n, dtype=np.int64)
        if n > 1:
            draws = self._raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(draws[n - 1 - i] % np.uint64(i + 1))
                out[i], out[j] = out[j], out[i]
        return out
