"""Kernel dispatch: compiled extension when importable, pure Python otherwise.

Set ``ECO_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("ECO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

if _compiled is not None:
    hash_ngrams = _compiled.hash_ngrams
else:
    hash_ngrams = _kernels_py.hash_ngrams

__all__ = ["BACKEND", "hash_ngrams"]
