"""Edit-distance kernels with a compiled fast path.

The Cython extension ``flgfn._kernels._editdist`` is used when it was built;
otherwise the pure-Python implementations below are used. Set
``FLGFN_PURE_PYTHON=1`` to force the fallback.

All functions take bit strings as ``uint8`` arrays (one element per bit) or as
``str``/``bytes`` of ``'0'``/``'1'`` characters.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "edit_distance",
    "min_edit_distance",
    "min_edit_distance_batch",
    "py_edit_distance",
    "py_min_edit_distance",
    "py_min_edit_distance_batch",
]


def _as_u8(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return np.ascontiguousarray(x, dtype=np.uint8)
    if isinstance(x, (str, bytes)):
        s = x.decode() if isinstance(x, bytes) else x
        return np.frombuffer(s.encode("ascii"), dtype=np.uint8) - ord("0")
    return np.asarray(list(x), dtype=np.uint8)


def py_edit_distance(a, b) -> int:
    a = _as_u8(a).tolist()
    b = _as_u8(b).tolist()
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def py_min_edit_distance(x, modes: np.ndarray) -> int:
    best = -1
    for y in np.asarray(modes, dtype=np.uint8):
        d = py_edit_distance(x, y)
        if best < 0 or d < best:
            best = d
            if best == 0:
                break
    return best


def py_min_edit_distance_batch(xs: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Vectorised over (string, mode) pairs; loops over the DP grid only."""
    xs = np.asarray(xs, dtype=np.uint8)
    modes = np.asarray(modes, dtype=np.uint8)
    n, la = xs.shape
    m, lb = modes.shape
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # rows[p, q, j] = distance(xs[p, :i], modes[q, :j])
    prev = np.broadcast_to(np.arange(lb + 1, dtype=np.int32), (n, m, lb + 1)).copy()
    for i in range(1, la + 1):
        cur = np.empty_like(prev)
        cur[:, :, 0] = i
        mismatch = (xs[:, i - 1][:, None, None] != modes[None, :, :]).astype(np.int32)
        sub_or_del = np.minimum(prev[:, :, :-1] + mismatch, prev[:, :, 1:] + 1)
        for j in range(1, lb + 1):
            cur[:, :, j] = np.minimum(sub_or_del[:, :, j - 1], cur[:, :, j - 1] + 1)
        prev = cur
    return prev[:, :, lb].min(axis=1).astype(np.int64)


BACKEND = "python"
_ext = None
if os.environ.get("FLGFN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from flgfn._kernels import _editdist as _ext

        BACKEND = "cython"
    except ImportError:
        _ext = None


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    if _ext is None:
        return py_edit_distance(a, b)
    return int(_ext.edit_distance(_as_u8(a), _as_u8(b)))


def min_edit_distance(x, modes: np.ndarray) -> int:
    if _ext is None:
        return py_min_edit_distance(x, modes)
    return int(_ext.min_edit_distance(_as_u8(x), np.ascontiguousarray(modes, dtype=np.uint8)))


def min_edit_distance_batch(xs: np.ndarray, modes: np.ndarray) -> np.ndarray:
    xs = np.ascontiguousarray(xs, dtype=np.uint8)
    modes = np.ascontiguousarray(modes, dtype=np.uint8)
    if _ext is None:
        return py_min_edit_distance_batch(xs, modes)
    return _ext.min_edit_distance_batch(xs, modes)
