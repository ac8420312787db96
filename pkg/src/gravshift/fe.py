"""Fixed-effect absorption by alternating within-group demeaning."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float]):
        super().__init__(message)
        self.trace = list(trace)


def encode(ids: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary hashable ids to 0..G-1; returns (codes, sorted levels)."""
    levels, codes = np.unique(np.asarray([str(i) for i in ids], dtype=object), return_inverse=True)
    return codes.astype(np.intp), levels


@dataclass
class Absorbed:
    """Result of :func:`absorb_fixed_effects`.

    ``effects[f]`` is a ``(n_levels_f, k)`` array such that
    ``original == demeaned + sum_f effects[f][codes[f]]``.
    """

    demeaned: np.ndarray
    effects: list[np.ndarray]
    levels: list[np.ndarray]
    codes: list[np.ndarray]
    iterations: int
    max_change: float
    trace: list[float]


def absorb_fixed_effects(columns: np.ndarray, families: Sequence[Sequence], tol: float = 1e-10,
                         max_iter: int = 10_000) -> Absorbed:
    """Project ``columns`` off the span of every group-indicator family.

    Sweeps through the families subtracting group means until the largest
    mean removed in a full sweep is below ``tol``.  With one family the
    first sweep is an exact projection, so it is the only one.
    """
    if not families:
        raise ValueError("need at least one fixed-effect family")
    cols = np.asarray(columns, dtype=float)
    squeeze = cols.ndim == 1
    resid = cols.reshape(len(cols), -1).copy()
    n, k = resid.shape
    codes, levels, counts, effects = [], [], [], []
    for fam in families:
        if len(fam) != n:
            raise ValueError(f"fixed-effect family has {len(fam)} ids for {n} rows")
        c, lv = encode(fam)
        codes.append(c)
        levels.append(lv)
        counts.append(np.bincount(c, minlength=len(lv)).astype(float))
        effects.append(np.zeros((len(lv), k)))

    trace: list[float] = []
    for it in range(1, max_iter + 1):
        change = 0.0
        for f, c in enumerate(codes):
            means = np.empty((len(levels[f]), k))
            for j in range(k):
                means[:, j] = np.bincount(c, weights=resid[:, j], minlength=len(levels[f])) / counts[f]
            resid -= means[c]
            effects[f] += means
            change = max(change, float(np.max(np.abs(means))) if means.size else 0.0)
        trace.append(change)
        if change < tol or len(codes) == 1:
            break
    else:
        raise ConvergenceError(
            f"fixed-effect absorption did not converge in {max_iter} iterations "
            f"(last max change {trace[-1]:.3g})", trace)
    out = resid[:, 0] if squeeze else resid
    return Absorbed(out, effects, levels, codes, len(trace), trace[-1], trace)


def fe_degrees(families: Sequence[Sequence]) -> int:
    """Rank of the stacked group-indicator matrix.

    Exact for one or two families (levels minus connected components of the
    bipartite graph for two); for more families subtracts one per extra
    family, which is exact when the graph is connected.
    """
    coded = [encode(f)[0] for f in families]
    sizes = [int(c.max()) + 1 if len(c) else 0 for c in coded]
    if len(coded) == 1:
        return sizes[0]
    if len(coded) == 2:
        parent = list(range(sizes[0] + sizes[1]))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in zip(coded[0], coded[1]):
            ra, rb = find(int(a)), find(sizes[0] + int(b))
            if ra != rb:
                parent[ra] = rb
        components = len({find(i) for i in range(len(parent))})
        return sizes[0] + sizes[1] - components
    return sum(sizes) - (len(sizes) - 1)
