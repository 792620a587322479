"""Coarse interpolation: fill invalid cells from their K nearest valid cells.

Neighbors are found with an expanding-ring search over the lattice. A ring
at Chebyshev radius r only contains cells with squared Euclidean distance
>= r^2, and every unexplored cell beyond it is at >= (r+1)^2, so the search
can stop as soon as the current k-th best squared distance beats (r+1)^2.
All comparisons use integer squared distances, which makes the result (and
its ties) exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import ChannelGrid

__all__ = ["KnnConfig", "nearest_valid", "knn_fill"]

_WEIGHTINGS = ("uniform", "inverse-distance")


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    weighting: str = "uniform"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.weighting not in _WEIGHTINGS:
            raise ValueError(
                f"weighting must be one of {_WEIGHTINGS}, got {self.weighting!r}"
            )


@lru_cache(maxsize=None)
def _ring(r: int):
    """Offsets at Chebyshev radius r, sorted by (d^2, di, dj)."""
    if r == 0:
        return np.zeros((1, 2), dtype=np.int64), np.zeros(1, dtype=np.int64)
    span = np.arange(-r, r + 1, dtype=np.int64)
    offs = [(di, dj) for di in span for dj in span if max(abs(di), abs(dj)) == r]
    offs = np.array(offs, dtype=np.int64)
    d2 = offs[:, 0] ** 2 + offs[:, 1] ** 2
    order = np.lexsort((offs[:, 1], offs[:, 0], d2))
    return offs[order], d2[order]


def _search(mask, i, j, k):
    """(d2, row, col) triples of the k nearest valid cells, sorted with ties
    broken by (row, col) ascending. Returns fewer than k when the grid has
    fewer valid cells."""
    h, w = mask.shape
    found_d2 = []
    found_ij = []
    count = 0
    r_max = max(h, w)
    for r in range(r_max + 1):
        offs, d2 = _ring(r)
        ii = offs[:, 0] + i
        jj = offs[:, 1] + j
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        if ok.any():
            ii, jj, rd2 = ii[ok], jj[ok], d2[ok]
            hit = mask[ii, jj] == 1.0
            if hit.any():
                found_d2.append(rd2[hit])
                found_ij.append(np.column_stack([ii[hit], jj[hit]]))
                count += int(hit.sum())
        if count >= k:
            kth = np.partition(np.concatenate(found_d2), k - 1)[k - 1]
            if (r + 1) ** 2 > kth:
                break
    if count == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, 2), dtype=np.int64)
    all_d2 = np.concatenate(found_d2)
    all_ij = np.vstack(found_ij)
    order = np.lexsort((all_ij[:, 1], all_ij[:, 0], all_d2))[: min(k, count)]
    return all_d2[order], all_ij[order]


def nearest_valid(grid: ChannelGrid, target, k: int):
    """The k nearest valid cells to `target` by Euclidean cell distance.

    Returns a list of ((row, col), distance) pairs sorted by distance, ties
    broken by (row, col) ascending. When the grid holds fewer than k valid
    cells, all of them are returned.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    i, j = target
    d2, cells = _search(grid.mask, int(i), int(j), k)
    return [
        ((int(ci), int(cj)), float(np.sqrt(dd)))
        for (ci, cj), dd in zip(cells, d2)
    ]


def knn_fill(grid: ChannelGrid, cfg: KnnConfig) -> ChannelGrid:
    """The operator E = K(D, M): complete the grid by weighted KNN averages.

    Invalid cells receive sum(w_i * y_i) / sum(w_i) over their
    min(k, V) nearest valid cells; weights are 1 (uniform) or the inverse
    Euclidean distance. Valid cells pass through unchanged; the returned
    grid has an all-ones mask (keep the input grid for the original mask).
    """
    if grid.num_valid == 0:
        raise ValueError("cannot fill a grid with no valid entries")
    mask = grid.mask
    values = grid.values.copy()
    inverse = cfg.weighting == "inverse-distance"
    for i, j in np.argwhere(mask == 0.0):
        d2, cells = _search(mask, int(i), int(j), cfg.k)
        y = grid.values[cells[:, 0], cells[:, 1]]
        if inverse:
            # target is invalid and neighbors are valid distinct cells,
            # so d >= 1 cell always; no zero-distance guard is needed
            w = 1.0 / np.sqrt(d2.astype(float))
            values[i, j] = (w * y).sum() / w.sum()
        else:
            values[i, j] = y.sum() / y.size
    return ChannelGrid(grid.spec, values, np.ones(grid.spec.shape))
