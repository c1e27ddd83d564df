# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels; must match ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL
cdef uint64_t SEED_MIX = 0x9E3779B97F4A7C15ULL


def hash_ngrams(str text, Py_ssize_t dim, unsigned long long seed, int nmin, int nmax):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dim, dtype=np.float64)
    cdef Py_ssize_t length = len(text)
    cdef cnp.ndarray[cnp.uint32_t, ndim=1] codes = np.empty(length, dtype=np.uint32)
    cdef Py_ssize_t i, j
    cdef int n
    cdef uint64_t h, start_h
    for i in range(length):
        codes[i] = <cnp.uint32_t>ord(text[i])
    start_h = FNV_OFFSET ^ (<uint64_t>seed * SEED_MIX)
    for n in range(nmin, nmax + 1):
        for i in range(length - n + 1):
            h = start_h ^ <uint64_t>n
            h = h * FNV_PRIME
            for j in range(i, i + n):
                h = h ^ <uint64_t>codes[j]
                h = h * FNV_PRIME
            if (h >> 32) & 1:
                out[h % <uint64_t>dim] += 1.0
            else:
                out[h % <uint64_t>dim] -= 1.0
    return out
