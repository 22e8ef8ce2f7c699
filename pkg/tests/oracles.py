"""Independent brute-force references used by the tests.

Nothing here imports the code under test beyond plain state objects, so the
values these produce can be trusted as ground truth.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


def naive_edit_distance(a: str, b: str) -> int:
    """Textbook recursion on suffixes, memoised only to keep it tractable."""

    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if a[i] == b[j]:
            return d(i + 1, j + 1)
        return 1 + min(d(i + 1, j), d(i, j + 1), d(i + 1, j + 1))

    return d(0, 0)


def set_rewards(energies, target_size: int, beta: float = 1.0) -> dict[tuple, float]:
    """Reward of every terminal set by direct enumeration."""
    return {c: math.exp(-beta * sum(energies[i] for i in c))
            for c in itertools.combinations(range(len(energies)), target_size)}


def set_terminal_prob_by_orders(policy, x: tuple) -> float:
    """Sum over all insertion orders of ``x`` of the product of step probabilities.

    ``policy(chosen: frozenset, a: int)`` returns P_F(a | chosen).
    """
    total = 0.0
    for order in itertools.permutations(x):
        p, chosen = 1.0, frozenset()
        for a in order:
            p *= policy(chosen, a)
            chosen = chosen | {a}
        total += p
    return total


def pairwise_spearman(x, y) -> float:
    """Spearman's rho from average ranks computed by O(n^2) pairwise counting."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    def ranks(v):
        out = np.empty(len(v))
        for i in range(len(v)):
            less = sum(1 for j in range(len(v)) if v[j] < v[i])
            ties = sum(1 for j in range(len(v)) if v[j] == v[i])
            out[i] = less + (ties + 1) / 2.0
        return out

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx * rx).sum() * (ry * ry).sum()))


def central_difference(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Numerical gradient of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
