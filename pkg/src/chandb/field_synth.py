"""Synthetic ground-truth channel fields.

Generates fields from the same statistical model the interpolators assume:
log-distance path loss plus exponentially correlated log-normal shadowing
plus white fading. This stands in for measurement data so every estimator
can be verified against a known truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .grid import ChannelGrid, GridSpec, Sample, cell_distances
from .gp_model import log_distance_mean

__all__ = [
    "FieldParams",
    "MAX_DENSE_CELLS",
    "mean_field",
    "ShadowingSampler",
    "sample_shadowing",
    "synth_field",
    "field_to_samples",
]

# Dense covariance factorization guard; larger grids would need block or
# spectral generation, which is out of scope at desk scale.
MAX_DENSE_CELLS = 10_000


@dataclass(frozen=True)
class FieldParams:
    """Ground-truth channel model parameters.

    d0 is the shadowing correlation distance in cell units (the covariance
    is defined on lattice indices); bs_position is a (row, col) pair in
    fractional cell units, so an off-lattice base station is representable.
    """

    g0: float
    eta: float
    d0: float
    sigma_psi: float
    sigma_zeta: float
    bs_position: tuple[float, float]

    def __post_init__(self):
        if self.sigma_psi < 0 or self.sigma_zeta < 0:
            raise ValueError("standard deviations must be non-negative")
        if not self.d0 > 0:
            raise ValueError("correlation distance d0 must be positive")


def mean_field(params: FieldParams, spec: GridSpec) -> np.ndarray:
    """Deterministic part g0 - 10*eta*log10(L) with L in meters.

    Rejects grids where some cell center coincides with the base station
    (the log-distance law is singular there).
    """
    dist = cell_distances(spec, params.bs_position)
    if np.any(dist == 0.0):
        raise ValueError("a cell center coincides with the BS position")
    return log_distance_mean(params.g0, params.eta, dist)


class ShadowingSampler:
    """Draws correlated shadowing fields for one (params, spec) pair.

    The dense covariance factorization is done once in the constructor, so
    repeated draws (benchmark seeds, Monte Carlo loops) amortize its cost.
    """

    def __init__(self, params: FieldParams, spec: GridSpec):
        n = spec.height * spec.width
        if n > MAX_DENSE_CELLS:
            raise ValueError(
                f"grid has {n} cells; dense shadowing generation is guarded "
                f"at {MAX_DENSE_CELLS}"
            )
        self.params = params
        self.spec = spec
        self._chol = None
        if params.sigma_psi > 0:
            ii, jj = np.meshgrid(
                np.arange(spec.height), np.arange(spec.width), indexing="ij"
            )
            pts = np.column_stack([ii.ravel(), jj.ravel()]).astype(float)
            # distances in cell units, matching the lattice-indexed covariance
            cov = params.sigma_psi ** 2 * np.exp(
                -squareform(pdist(pts)) / params.d0
            )
            try:
                self._chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                jitter = 1e-8 * params.sigma_psi ** 2
                cov[np.diag_indices_from(cov)] += jitter
                self._chol = np.linalg.cholesky(cov)

    def sample(self, seed) -> np.ndarray:
        """One zero-mean draw of shadowing plus white fading, H x W in dB."""
        rng = np.random.default_rng(seed)
        shape = self.spec.shape
        z = rng.standard_normal(shape[0] * shape[1])
        psi = (self._chol @ z).reshape(shape) if self._chol is not None else np.zeros(shape)
        zeta = self.params.sigma_zeta * rng.standard_normal(shape)
        return psi + zeta


def sample_shadowing(params: FieldParams, spec: GridSpec, seed) -> np.ndarray:
    """One-shot convenience wrapper around ShadowingSampler."""
    return ShadowingSampler(params, spec).sample(seed)


def synth_field(params: FieldParams, spec: GridSpec, seed) -> np.ndarray:
    """Full synthetic field: mean plus seeded fading, H x W in dB."""
    return mean_field(params, spec) + sample_shadowing(params, spec, seed)


def field_to_samples(spec: GridSpec, field, keep_fraction: float, seed) -> list[Sample]:
    """Sample a ground-truth field at a random subset of cell centers.

    Keeps round(keep_fraction * H * W) distinct cells, chosen by a seeded
    permutation, and returns them as Sample records suitable for re-gridding.
    """
    field = np.asarray(field, dtype=float)
    if field.shape != spec.shape:
        raise ValueError(f"field shape {field.shape} does not match grid {spec.shape}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = field.size
    n_keep = int(round(keep_fraction * n))
    if n_keep == 0:
        raise ValueError("keep_fraction keeps no cells")
    order = np.random.default_rng(seed).permutation(n)[:n_keep]
    rows, cols = np.unravel_index(np.sort(order), field.shape)
    out = []
    for i, j in zip(rows, cols):
        x1, x2 = spec.cell_center(int(i), int(j))
        out.append(Sample(x1, x2, float(field[i, j])))
    return out
