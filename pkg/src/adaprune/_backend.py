"""Kernel backend selection.

Numba is used when importable unless ``ADAPRUNE_DISABLE_NUMBA`` is set to a
truthy value, in which case every kernel runs its pure-numpy twin. Both paths
accumulate each output element sequentially over the contraction axis, so
their GEMM results agree bit for bit.
"""
from __future__ import annotations

import os

_FLAG = "ADAPRUNE_DISABLE_NUMBA"


def _disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in ("", "0", "false", "no", "off")


try:
    if _disabled():
        raise ImportError("numba disabled by " + _FLAG)
    from numba import njit  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"
