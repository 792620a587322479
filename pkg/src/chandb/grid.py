"""Quantization of scattered channel samples onto a regular grid.

A measurement campaign yields records (x1, x2, gain_db) at arbitrary planar
positions. This module snaps them to an H x W lattice, producing the value
matrix D (cell averages in dB) and the mask matrix M (1 where at least one
sample landed). The mask, never the value, decides whether a cell is valid:
a true gain of exactly 0 dB is stored as 0 with mask 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Sample",
    "GridSpec",
    "ChannelGrid",
    "round_half_away",
    "map_coordinate",
    "cell_distances",
    "build_grid",
    "split_valid",
]


def round_half_away(x: float) -> int:
    """Round to the nearest integer with .5 ties going away from zero."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class Sample:
    """One user record: planar coordinate in meters plus channel gain in dB."""

    x1: float
    x2: float
    gain_db: float

    def __post_init__(self):
        for name in ("x1", "x2", "gain_db"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Sample.{name} must be finite")


@dataclass(frozen=True)
class GridSpec:
    """Bounding box and resolution of the lattice.

    Cell (i, j) is centered at (x1_min + i*q, x2_min + j*q); indices are
    0-based here while the quantizer itself follows the 1-based convention
    round((x - x_min)/q) + 1 (the two differ by the constant 1).
    """

    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    q: float

    def __post_init__(self):
        if not self.q > 0:
            raise ValueError("grid resolution q must be positive")
        if self.x1_max < self.x1_min or self.x2_max < self.x2_min:
            raise ValueError("grid bounds must satisfy max >= min")

    @property
    def height(self) -> int:
        return round_half_away((self.x1_max - self.x1_min) / self.q) + 1

    @property
    def width(self) -> int:
        return round_half_away((self.x2_max - self.x2_min) / self.q) + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.x1_min + i * self.q, self.x2_min + j * self.q)


def map_coordinate(spec: GridSpec, x1: float, x2: float) -> tuple[int, int]:
    """Quantize a coordinate to its 0-based (row, col) cell index.

    The quantizer is round((x - x_min)/q) per axis with ties away from zero.
    Coordinates whose quantized index falls outside the grid are rejected;
    note the exact top-edge tie x_max + q/2 rounds outward and is rejected
    as well.
    """
    i = round_half_away((x1 - spec.x1_min) / spec.q)
    j = round_half_away((x2 - spec.x2_min) / spec.q)
    if not (0 <= i < spec.height and 0 <= j < spec.width):
        raise ValueError(
            f"coordinate ({x1}, {x2}) quantizes to cell ({i}, {j}) "
            f"outside the {spec.height}x{spec.width} grid"
        )
    return (i, j)


def cell_distances(spec: GridSpec, position: tuple[float, float]) -> np.ndarray:
    """Euclidean distance in meters from every cell center to `position`.

    `position` is given in fractional cell units (row, col), so a base
    station between lattice points is representable exactly.
    """
    r, c = position
    di = np.arange(spec.height, dtype=float)[:, None] - r
    dj = np.arange(spec.width, dtype=float)[None, :] - c
    return spec.q * np.hypot(di, dj)


@dataclass
class ChannelGrid:
    """The database pair: value matrix D and mask matrix M over one GridSpec."""

    spec: GridSpec
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        shape = self.spec.shape
        if self.values.shape != shape or self.mask.shape != shape:
            raise ValueError(
                f"values/mask shape {self.values.shape}/{self.mask.shape} "
                f"does not match grid {shape}"
            )
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask entries must be exactly 0 or 1")
        if np.any(self.values[self.mask == 0.0] != 0.0):
            raise ValueError("values must be 0 wherever mask is 0")
        if not np.isfinite(self.values).all():
            raise ValueError("grid values must be finite")

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())

    def valid_cells(self) -> np.ndarray:
        """Indices of mask==1 cells as an (V, 2) int array, row-major order."""
        return np.argwhere(self.mask == 1.0)

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask == 1.0]

    def copy(self) -> "ChannelGrid":
        return ChannelGrid(self.spec, self.values.copy(), self.mask.copy())


def build_grid(spec: GridSpec, samples) -> ChannelGrid:
    """Accumulate samples into a ChannelGrid; co-located records are averaged.

    The average is the arithmetic mean of the dB gains (no linear-power
    detour). Per-cell contributions are summed in sorted order so the result
    is exactly permutation-invariant in the sample list. An empty sample
    list yields a valid all-zero-mask grid.
    """
    cells: dict[tuple[int, int], list[float]] = {}
    for s in samples:
        idx = map_coordinate(spec, s.x1, s.x2)
        cells.setdefault(idx, []).append(s.gain_db)

    values = np.zeros(spec.shape)
    mask = np.zeros(spec.shape)
    for (i, j), gains in cells.items():
        g = np.sort(np.asarray(gains))
        values[i, j] = g.sum() / g.size
        mask[i, j] = 1.0
    return ChannelGrid(spec, values, mask)


def split_valid(grid: ChannelGrid, fraction: float = 0.8, seed: int = 0):
    """Randomly split the valid set V into a train part T and a label part L.

    Returns (train_grid, label_mask) where the train grid keeps
    round(fraction * V) valid entries and label_mask = M_V - M_T marks the
    held-out cells. The two masks are disjoint and union to the input mask.

    Args:
        grid: source database with V >= 2 valid entries.
        fraction: share of valid entries kept for T, 0 < fraction < 1.
        seed: permutation seed; the split is deterministic under it.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    cells = grid.valid_cells()
    v = len(cells)
    if v < 2:
        raise ValueError("need at least 2 valid entries to split")
    n_train = int(round(fraction * v))
    if n_train == 0 or n_train == v:
        raise ValueError(
            f"fraction {fraction} leaves an empty subset for V={v}"
        )
    order = np.random.default_rng(seed).permutation(v)
    keep = cells[order[:n_train]]

    train_mask = np.zeros(grid.spec.shape)
    train_mask[keep[:, 0], keep[:, 1]] = 1.0
    train_values = np.where(train_mask == 1.0, grid.values, 0.0)
    label_mask = grid.mask - train_mask
    return ChannelGrid(grid.spec, train_values, train_mask), label_mask
