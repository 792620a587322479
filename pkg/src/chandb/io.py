"""File formats: sample CSV, grid/mask CSV pairs, PGM heatmaps, models.

Sample files carry the header ``x1,x2,gain_db`` and one record per line.
Grids are written as H rows of W comma-separated values with full float64
precision, with the mask in a sibling file so a values file can always be
re-paired with its validity information.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .grid import ChannelGrid, GridSpec, Sample

__all__ = [
    "read_samples_csv",
    "write_samples_csv",
    "read_grid_csv",
    "write_grid_csv",
    "mask_path_for",
    "write_grid",
    "read_grid",
    "write_pgm",
]

_SAMPLE_HEADER = ["x1", "x2", "gain_db"]


def read_samples_csv(path) -> list[Sample]:
    """Parse a sample CSV; raises ValueError with the offending line number."""
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _SAMPLE_HEADER:
            raise ValueError(
                f"{path}: expected header {','.join(_SAMPLE_HEADER)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            try:
                samples.append(Sample(float(row[0]), float(row[1]), float(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return samples


def write_samples_csv(path, samples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SAMPLE_HEADER)
        for s in samples:
            writer.writerow([repr(s.x1), repr(s.x2), repr(s.gain_db)])


def write_grid_csv(path, matrix) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=float), delimiter=",", fmt="%.17g")


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def mask_path_for(values_path) -> Path:
    """Sibling mask file: grid.csv -> grid.mask.csv."""
    p = Path(values_path)
    return p.with_suffix(".mask" + p.suffix) if p.suffix else p.with_name(p.name + ".mask")


def write_grid(values_path, grid: ChannelGrid, mask_path=None) -> Path:
    """Write values plus the sibling mask CSV; returns the mask path used."""
    mask_path = Path(mask_path) if mask_path else mask_path_for(values_path)
    write_grid_csv(values_path, grid.values)
    np.savetxt(mask_path, grid.mask.astype(int), delimiter=",", fmt="%d")
    return mask_path


def read_grid(values_path, mask_path=None, q: float = 1.0,
              x1_min: float = 0.0, x2_min: float = 0.0) -> ChannelGrid:
    """Re-assemble a ChannelGrid from a values CSV and its mask.

    The CSV pair does not carry geometry, so resolution and origin are
    supplied here; bounds follow from the matrix shape.
    """
    values = read_grid_csv(values_path)
    mask_path = Path(mask_path) if mask_path else mask_path_for(values_path)
    mask = read_grid_csv(mask_path)
    h, w = values.shape
    spec = GridSpec(x1_min, x1_min + (h - 1) * q, x2_min, x2_min + (w - 1) * q, q)
    return ChannelGrid(spec, values, mask)


def write_pgm(path, values, mask=None) -> None:
    """Render a grid as a 16-bit binary PGM heatmap.

    Valid entries are affinely scaled from [min, max] onto [1, 65535];
    invalid cells render as 0. A constant field maps to full white.
    """
    values = np.asarray(values, dtype=float)
    mask = np.ones_like(values) if mask is None else np.asarray(mask, dtype=float)
    h, w = values.shape
    img = np.zeros((h, w), dtype=np.uint16)
    valid = mask == 1.0
    if valid.any():
        lo = values[valid].min()
        hi = values[valid].max()
        if hi > lo:
            scaled = 1.0 + (values[valid] - lo) / (hi - lo) * 65534.0
        else:
            scaled = np.full(valid.sum(), 65535.0)
        img[valid] = np.round(scaled).astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(struct.pack(f">{h * w}H", *img.ravel().tolist()))
