"""Deterministic random numbers with stable cross-platform streams.

All randomness in the package flows through a counter-based Philox
generator keyed by (seed, stream).  Philox output is specified by the
algorithm itself rather than by hidden global state, so a (seed, stream)
pair reproduces the same draws on any platform and regardless of how
many other streams were consumed before it.

Gaussian deviates are produced by an explicit Box-Muller transform in
float64 instead of the Generator's ziggurat method, which keeps the
mapping from uniform bits to normal deviates pinned by this module
alone.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15


def stream_key(*parts: int) -> int:
    """Fold a tuple of integers into a single 64-bit stream id."""
    h = 0
    for p in parts:
        h = (h * _MIX + (int(p) + 1)) & _MASK64
    return h


def generator(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for the given seed and stream coordinates."""
    key = np.array([int(seed) & _MASK64, stream_key(*stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform(gen: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws in [0, 1) as float64."""
    return gen.random(size=shape, dtype=np.float64)


def gaussian(gen: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws via Box-Muller on Philox uniforms."""
    n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
    pairs = (n + 1) // 2
    # 1 - u keeps the log argument in (0, 1], avoiding log(0).
    u1 = 1.0 - gen.random(size=pairs, dtype=np.float64)
    u2 = gen.random(size=pairs, dtype=np.float64)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    return z[:n].reshape(shape)
