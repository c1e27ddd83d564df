"""Pure-Python versions of the hot kernels.

These are the reference implementations; ``_kernels.pyx`` must produce
bit-identical output for every input.
"""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
SEED_MIX = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def hash_ngrams(text: str, dim: int, seed: int, nmin: int, nmax: int) -> np.ndarray:
    """Signed feature-hashing of character n-grams into ``dim`` buckets.

    ``text`` is used as given; callers normalize (lowercase, padding) first.
    Returns the raw (unnormalized) count vector.
    """
    out = np.zeros(dim, dtype=np.float64)
    codes = [ord(ch) for ch in text]
    length = len(codes)
    start_h = FNV_OFFSET ^ ((seed * SEED_MIX) & MASK64)
    for n in range(nmin, nmax + 1):
        for i in range(length - n + 1):
            h = start_h ^ n
            h = (h * FNV_PRIME) & MASK64
            for j in range(i, i + n):
                h ^= codes[j]
                h = (h * FNV_PRIME) & MASK64
            bucket = h % dim
            if (h >> 32) & 1:
                out[bucket] += 1.0
            else:
                out[bucket] -= 1.0
    return out
