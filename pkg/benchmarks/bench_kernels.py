"""Compare the compiled and pure-Python n-gram hashing kernels.

    python benchmarks/bench_kernels.py [--texts 2000] [--dim 256] [--repeat 3]
"""
from __future__ import annotations

import argparse
import json
import random
import string
import timeit

import numpy as np

from eco import _kernels_py

try:
    from eco import _kernels
except ImportError:  # extension not built
    _kernels = None


def corpus(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    words = ["".join(rng.choices(string.ascii_lowercase, k=rng.randint(3, 10))) for _ in range(500)]
    return [" ".join(rng.choices(words, k=rng.randint(8, 40))) for _ in range(n)]


def bench(fn, texts: list[str], dim: int, repeat: int) -> float:
    def run() -> None:
        for t in texts:
            fn(t, dim, 0, 3, 5)
    return min(timeit.repeat(run, number=1, repeat=repeat))


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--texts", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    texts = corpus(args.texts)
    result = {"texts": args.texts, "dim": args.dim,
              "python_s": bench(_kernels_py.hash_ngrams, texts, args.dim, args.repeat)}
    if _kernels is not None:
        for t in texts[:50]:
            assert np.array_equal(_kernels.hash_ngrams(t, args.dim, 0, 3, 5),
                                  _kernels_py.hash_ngrams(t, args.dim, 0, 3, 5))
        result["cython_s"] = bench(_kernels.hash_ngrams, texts, args.dim, args.repeat)
        result["speedup"] = result["python_s"] / result["cython_s"]
    print(json.dumps(result, indent=2))
    return result


if __name__ == "__main__":
    main()
