"""Model-based interpolation of a channel-gain grid.

Fits the log-distance path-loss parameters by least squares, estimates the
fading variance from the residuals, searches the shadowing correlation
distance d0 by leave-one-out prediction error, and fills invalid cells with
the neighborhood-truncated linear MMSE estimator.

All covariance distances are measured in cell-index units (lattice steps);
path-loss distances are in meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .grid import ChannelGrid, cell_distances

__all__ = [
    "GpParams",
    "Neighborhood",
    "log_distance_mean",
    "fit_pathloss",
    "residual_fading",
    "mmse_predict",
    "predict_mse",
    "fit_d0",
    "d0_loss_curve",
    "fit_gp",
    "gp_interpolate",
    "gp_interpolate_detailed",
]


@dataclass(frozen=True)
class GpParams:
    """Fitted (or assumed) channel model parameters.

    total_var is the lumped fading variance sigma_psi^2 + sigma_zeta^2 in
    dB^2. The split between the two is not identifiable from the fit alone;
    by default the model assumes the white part is zero, so the shadowing
    variance equals total_var. Set sigma_psi_sq explicitly to override.
    """

    g0: float
    eta: float
    d0: float
    total_var: float
    bs_position: tuple[float, float]
    sigma_psi_sq: float | None = None

    def __post_init__(self):
        if self.total_var < 0:
            raise ValueError("total_var must be non-negative")
        if not self.d0 > 0:
            raise ValueError("correlation distance d0 must be positive")
        if self.sigma_psi_sq is not None and not (
            0.0 <= self.sigma_psi_sq <= self.total_var
        ):
            raise ValueError("sigma_psi_sq must lie in [0, total_var]")

    @property
    def shadowing_var(self) -> float:
        return self.total_var if self.sigma_psi_sq is None else self.sigma_psi_sq

    @property
    def noise_ratio(self) -> float:
        """sigma_zeta^2 / sigma_psi^2, the only ratio the estimator needs."""
        psi_sq = self.shadowing_var
        if psi_sq == 0.0:
            raise ValueError("noise ratio undefined for zero shadowing variance")
        return (self.total_var - psi_sq) / psi_sq


@dataclass(frozen=True)
class Neighborhood:
    """Truncation window: valid entries within Chebyshev range n_range."""

    n_range: int = 4

    def __post_init__(self):
        if self.n_range < 1:
            raise ValueError("n_range must be at least 1")


def log_distance_mean(g0: float, eta: float, distances_m) -> np.ndarray:
    """Log-distance path-loss mean g0 - 10*eta*log10(L), L in meters."""
    return g0 - 10.0 * eta * np.log10(np.asarray(distances_m, dtype=float))


def _valid_geometry(grid: ChannelGrid, bs_position):
    cells = grid.valid_cells()
    if len(cells) == 0:
        raise ValueError("grid has no valid entries")
    y = grid.values[cells[:, 0], cells[:, 1]]
    dist = cell_distances(grid.spec, bs_position)[cells[:, 0], cells[:, 1]]
    return cells, y, dist


def fit_pathloss(grid: ChannelGrid, bs_position) -> tuple[float, float]:
    """Least-squares fit of (g0, eta) on the valid entries.

    Solves min ||y - A [g0, eta]^T||^2 with rows A = [1, -10*log10(L)].
    Rejects degenerate geometry: a valid cell at the BS itself (log
    singularity) or all valid cells equidistant from it (rank deficiency).
    """
    _, y, dist = _valid_geometry(grid, bs_position)
    if len(y) < 2:
        raise ValueError("need at least 2 valid entries to fit the path loss")
    if np.any(dist == 0.0):
        raise ValueError("a valid cell coincides with the BS position")
    if np.unique(dist).size < 2:
        raise ValueError("all valid cells are equidistant from the BS; "
                         "the path-loss fit is rank-deficient")
    a = np.column_stack([np.ones_like(dist), -10.0 * np.log10(dist)])
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    if rank < 2:
        raise ValueError("rank-deficient path-loss design matrix")
    return float(coef[0]), float(coef[1])


def residual_fading(grid: ChannelGrid, g0: float, eta: float, bs_position):
    """Per-valid-cell fading residuals and their empirical variance.

    Returns (residual matrix, total_var). The matrix is zero outside the
    mask; total_var is the population variance (divide by V) of the valid
    residuals.
    """
    cells, y, dist = _valid_geometry(grid, bs_position)
    res = y - log_distance_mean(g0, eta, dist)
    matrix = np.zeros(grid.spec.shape)
    matrix[cells[:, 0], cells[:, 1]] = res
    return matrix, float(np.var(res))


def _solve_normalized(corr, rhs, noise_ratio):
    """Solve (corr + noise_ratio*I) x = rhs with one jitter retry.

    corr is the unit-diagonal correlation matrix; the jitter is 1e-8 of the
    normalized total variance (1 + noise_ratio), mirroring a 1e-8*total_var
    perturbation of the unnormalized system.
    """
    c = corr + noise_ratio * np.eye(len(corr))
    try:
        return cho_solve(cho_factor(c, lower=True), rhs)
    except np.linalg.LinAlgError:
        c[np.diag_indices_from(c)] += 1e-8 * (1.0 + noise_ratio)
        return cho_solve(cho_factor(c, lower=True), rhs)


def _window_cells(mask, i, j, n_range):
    """Valid cells inside the (2n+1)^2 Chebyshev window centered at (i, j)."""
    h, w = mask.shape
    r0, r1 = max(0, i - n_range), min(h, i + n_range + 1)
    c0, c1 = max(0, j - n_range), min(w, j + n_range + 1)
    local = np.argwhere(mask[r0:r1, c0:c1] == 1.0)
    local[:, 0] += r0
    local[:, 1] += c0
    return local


def _mean_matrix(grid, params):
    return log_distance_mean(
        params.g0, params.eta,
        cell_distances(grid.spec, params.bs_position),
    )


def _predict_cell(grid, params, nbhd, target, exclude_target, u):
    """Core single-cell estimator; returns (estimate, mse, used_fallback).

    `u` is the precomputed H x W path-loss mean matrix.
    """
    i, j = target
    nbr = _window_cells(grid.mask, i, j, nbhd.n_range)
    if exclude_target:
        keep = ~np.all(nbr == (i, j), axis=1)
        nbr = nbr[keep]
    if len(nbr) == 0:
        return float(u[i, j]), float(params.total_var), True
    psi_sq = params.shadowing_var
    if psi_sq == 0.0:
        # no spatial correlation to exploit; the prior mean is the estimate
        return float(u[i, j]), float(params.total_var), False
    nu = params.noise_ratio
    pts = nbr.astype(float)
    corr = np.exp(-cdist(pts, pts) / params.d0)
    r = np.exp(-np.hypot(pts[:, 0] - i, pts[:, 1] - j) / params.d0)
    resid = grid.values[nbr[:, 0], nbr[:, 1]] - u[nbr[:, 0], nbr[:, 1]]
    sol = _solve_normalized(corr, np.column_stack([resid, r]), nu)
    estimate = u[i, j] + float(r @ sol[:, 0])
    mse = max(float(params.total_var - psi_sq * (r @ sol[:, 1])), 0.0)
    return estimate, mse, False


def mmse_predict(grid: ChannelGrid, params: GpParams, nbhd: Neighborhood,
                 target, exclude_target: bool = False) -> float:
    """MMSE estimate of one cell from the valid entries in its window.

    The target must be an invalid cell unless exclude_target is set, in
    which case its own entry is dropped from the valid set (leave-one-out
    mode). With an empty window the estimate falls back to the path-loss
    mean.
    """
    i, j = target
    h, w = grid.spec.shape
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"target {target} outside the {h}x{w} grid")
    if grid.mask[i, j] == 1.0 and not exclude_target:
        raise ValueError(
            f"target {target} is a valid cell; use exclude_target=True "
            "for leave-one-out prediction"
        )
    estimate, _, _ = _predict_cell(
        grid, params, nbhd, (i, j), exclude_target, _mean_matrix(grid, params)
    )
    return estimate


def predict_mse(grid: ChannelGrid, params: GpParams, nbhd: Neighborhood,
                target, exclude_target: bool = False) -> float:
    """Predicted mean squared error of mmse_predict at `target`, in dB^2.

    Equals total_var - a^T C^-1 a over the same neighborhood; total_var
    itself when the window holds no usable entry.
    """
    i, j = target
    h, w = grid.spec.shape
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"target {target} outside the {h}x{w} grid")
    _, mse, _ = _predict_cell(
        grid, params, nbhd, (i, j), exclude_target, _mean_matrix(grid, params)
    )
    return mse


def _interpolate_impl(grid, params, nbhd, want_mse):
    if grid.num_valid == 0:
        raise ValueError("cannot interpolate a grid with no valid entries")
    h, w = grid.spec.shape
    u = _mean_matrix(grid, params)
    values = grid.values.copy()
    mse = np.zeros((h, w))
    fallback = np.zeros((h, w))
    targets = np.argwhere(grid.mask == 0.0)
    psi_sq = params.shadowing_var

    if psi_sq == 0.0:
        values[grid.mask == 0.0] = u[grid.mask == 0.0]
        mse[grid.mask == 0.0] = params.total_var
    elif nbhd.n_range >= max(h, w) and len(targets) > 0:
        # every window covers the whole grid: factor the dense system once
        cells = grid.valid_cells()
        pts = cells.astype(float)
        nu = params.noise_ratio
        resid = grid.values[cells[:, 0], cells[:, 1]] - u[cells[:, 0], cells[:, 1]]
        corr = np.exp(-cdist(pts, pts) / params.d0)
        big_r = np.exp(-cdist(targets.astype(float), pts) / params.d0)
        if want_mse:
            sol = _solve_normalized(corr, np.column_stack([resid, big_r.T]), nu)
            quad = np.einsum("ij,ji->i", big_r, sol[:, 1:])
            mse[targets[:, 0], targets[:, 1]] = np.maximum(
                params.total_var - psi_sq * quad, 0.0
            )
            weights = sol[:, 0]
        else:
            weights = _solve_normalized(corr, resid, nu)
        values[targets[:, 0], targets[:, 1]] = (
            u[targets[:, 0], targets[:, 1]] + big_r @ weights
        )
    else:
        for i, j in targets:
            est, cell_mse, used_fb = _predict_cell(
                grid, params, nbhd, (int(i), int(j)), False, u
            )
            values[i, j] = est
            mse[i, j] = cell_mse
            fallback[i, j] = float(used_fb)

    complete = ChannelGrid(grid.spec, values, np.ones((h, w)))
    return complete, mse, fallback


def gp_interpolate(grid: ChannelGrid, params: GpParams,
                   nbhd: Neighborhood) -> ChannelGrid:
    """Fill every invalid cell with its MMSE estimate; valid cells untouched."""
    complete, _, _ = _interpolate_impl(grid, params, nbhd, want_mse=False)
    return complete


def gp_interpolate_detailed(grid: ChannelGrid, params: GpParams,
                            nbhd: Neighborhood):
    """Like gp_interpolate, also reporting per-cell predicted MSE.

    Returns (complete grid, mse matrix, fallback matrix). The MSE is zero at
    originally valid cells; the fallback matrix marks cells whose window held
    no valid entry, which were filled with the bare path-loss mean.
    """
    return _interpolate_impl(grid, params, nbhd, want_mse=True)


def d0_loss_curve(grid: ChannelGrid, residuals, candidates,
                  nbhd: Neighborhood, noise_ratio: float = 0.0) -> np.ndarray:
    """Leave-one-out total squared error for each candidate d0.

    Every valid entry's fading residual is predicted from the other valid
    entries in its window; the loss for a candidate is the summed squared
    prediction error over all valid cells. `residuals` is the matrix from
    residual_fading.

    The per-cell neighbor geometry is built once and the per-candidate
    systems are solved as one inf-padded batch (exp(-inf/d0) = 0 makes the
    padded dimensions inert). The diagonal jitter is applied
    unconditionally here, since the batched solver has no retry path.
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.size == 0:
        raise ValueError("empty d0 search lattice")
    if np.any(candidates <= 0):
        raise ValueError("d0 candidates must be positive")
    residuals = np.asarray(residuals, dtype=float)

    cells = grid.valid_cells()
    v = len(cells)
    if v == 0:
        raise ValueError("grid has no valid entries")
    res_v = residuals[cells[:, 0], cells[:, 1]]

    neighborhoods = []
    for i, j in cells:
        nbr = _window_cells(grid.mask, int(i), int(j), nbhd.n_range)
        nbr = nbr[~np.all(nbr == (i, j), axis=1)]
        neighborhoods.append(nbr)
    k_max = max(len(n) for n in neighborhoods)
    if k_max == 0:
        # every valid cell is isolated; prediction is 0 for any d0
        return np.full(candidates.size, float(res_v @ res_v))

    est_bytes = v * k_max * k_max * 8
    if est_bytes > 1_500_000_000:
        raise ValueError(
            f"d0 search needs ~{est_bytes / 1e9:.1f} GB for n_range="
            f"{nbhd.n_range}; use a smaller neighborhood"
        )

    pair_d = np.full((v, k_max, k_max), np.inf)
    target_d = np.full((v, k_max), np.inf)
    nbr_res = np.zeros((v, k_max))
    diag = np.arange(k_max)
    pair_d[:, diag, diag] = 0.0
    for idx, ((i, j), nbr) in enumerate(zip(cells, neighborhoods)):
        k = len(nbr)
        if k == 0:
            continue
        pts = nbr.astype(float)
        pair_d[idx, :k, :k] = cdist(pts, pts)
        target_d[idx, :k] = np.hypot(pts[:, 0] - i, pts[:, 1] - j)
        nbr_res[idx, :k] = residuals[nbr[:, 0], nbr[:, 1]]

    jitter = noise_ratio + 1e-8 * (1.0 + noise_ratio)
    losses = np.empty(candidates.size)
    for ci, d0 in enumerate(candidates):
        corr = np.exp(-pair_d / d0)
        corr[:, diag, diag] += jitter
        weights = np.linalg.solve(corr, nbr_res[..., None])[..., 0]
        pred = (np.exp(-target_d / d0) * weights).sum(axis=1)
        losses[ci] = float(((pred - res_v) ** 2).sum())
    return losses


def fit_d0(grid: ChannelGrid, g0: float, eta: float, total_var: float,
           nbhd: Neighborhood, bs_position, d_min: float = 1.0,
           d_max: float = 50.0, step: float = 1.0,
           sigma_psi_sq: float | None = None) -> float:
    """One-dimensional search for the correlation distance d0, in cells.

    Scans the lattice d_min, d_min+step, ..., d_max and returns the
    candidate minimizing the leave-one-out loss of d0_loss_curve; ties go
    to the smallest candidate. total_var only matters when sigma_psi_sq is
    given (it sets the white-noise share of the covariance diagonal); the
    default assumes all fading is correlated.
    """
    if not (d_min > 0 and step > 0 and d_max >= d_min):
        raise ValueError("d0 search range must satisfy 0 < d_min <= d_max, step > 0")
    candidates = np.arange(d_min, d_max + 0.5 * step, step)
    noise_ratio = 0.0
    if sigma_psi_sq is not None:
        if not 0.0 < sigma_psi_sq <= total_var:
            raise ValueError("sigma_psi_sq must lie in (0, total_var]")
        noise_ratio = (total_var - sigma_psi_sq) / sigma_psi_sq
    residuals, _ = residual_fading(grid, g0, eta, bs_position)
    losses = d0_loss_curve(grid, residuals, candidates, nbhd, noise_ratio)
    return float(candidates[int(np.argmin(losses))])


def fit_gp(grid: ChannelGrid, bs_position, nbhd: Neighborhood,
           d_min: float = 1.0, d_max: float = 50.0,
           step: float = 1.0) -> GpParams:
    """Full parameter fit: path loss, residual variance, then the d0 search."""
    g0, eta = fit_pathloss(grid, bs_position)
    _, total_var = residual_fading(grid, g0, eta, bs_position)
    d0 = fit_d0(grid, g0, eta, total_var, nbhd, bs_position,
                d_min=d_min, d_max=d_max, step=step)
    return GpParams(g0, eta, d0, total_var, tuple(bs_position))
