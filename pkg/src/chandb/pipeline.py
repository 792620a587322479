"""End-to-end orchestration and the method-comparison harness.

Wires the modules together: split the valid set, KNN-preprocess, train the
refinement network, interpolate, assemble the final database G (valid cells
bit-identical to the input), and score everything with RMSE over a held-out
evaluation set. Also hosts the frozen synthetic reference benchmark used by
the comparative tests and the structure/runtime sweep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .convnet import (
    ConvNet,
    Normalizer,
    TrainConfig,
    adam_step,
    AdamState,
    forward,
    pad_input,
    parse_structure,
    structure_string,
    train_network,
)
from .field_synth import FieldParams, ShadowingSampler, mean_field
from .gp_model import GpParams, Neighborhood, fit_gp, gp_interpolate
from .grid import ChannelGrid, GridSpec, Sample, split_valid
from .io import read_grid, read_grid_csv
from .knn import KnnConfig, knn_fill

__all__ = [
    "REFERENCE_SEEDS",
    "reference_benchmark",
    "benchmark_instance",
    "EvalReport",
    "evaluate",
    "two_step_train",
    "two_step_interpolate",
    "fullnn_baseline",
    "ExperimentConfig",
    "run_experiment",
    "sweep",
    "default_sweep_configs",
]

REFERENCE_SEEDS = (1, 2, 3, 4, 5)
REFERENCE_STRUCTURE = "9-1-5(64-32-1)"


def reference_benchmark(sigma_zeta: float = 2.0):
    """The frozen desk-scale benchmark: 80x80 at q=0.5 m, BS at the center,
    g0=0, eta=3.5, d0=6 cells, sigma_psi=8 dB, sigma_zeta=2 dB (overridable
    for the noise-free variant)."""
    spec = GridSpec(0.0, 39.5, 0.0, 39.5, 0.5)
    params = FieldParams(
        g0=0.0, eta=3.5, d0=6.0, sigma_psi=8.0, sigma_zeta=sigma_zeta,
        bs_position=(39.5, 39.5),
    )
    return params, spec


def benchmark_instance(seed, params: FieldParams | None = None,
                       spec: GridSpec | None = None,
                       valid_fraction: float = 0.5,
                       sampler: ShadowingSampler | None = None):
    """One synthetic experiment instance: (truth, sampled grid, eval mask).

    Half the cells (or `valid_fraction`) are revealed as the database; the
    complement is the testing set. Field and mask use independent
    deterministic substreams of `seed`. Pass a prebuilt ShadowingSampler to
    amortize the covariance factorization across seeds.
    """
    if params is None or spec is None:
        dp, ds = reference_benchmark()
        params = params or dp
        spec = spec or ds
    if sampler is None:
        sampler = ShadowingSampler(params, spec)
    field_seed, mask_seed = np.random.SeedSequence(seed).spawn(2)
    truth = mean_field(params, spec) + sampler.sample(field_seed)

    n = spec.height * spec.width
    n_valid = int(round(valid_fraction * n))
    if not 0 < n_valid < n:
        raise ValueError(f"valid_fraction {valid_fraction} leaves no "
                         "valid or no evaluation cells")
    flat = np.zeros(n)
    flat[np.random.default_rng(mask_seed).permutation(n)[:n_valid]] = 1.0
    mask = flat.reshape(spec.shape)
    grid = ChannelGrid(spec, np.where(mask == 1.0, truth, 0.0), mask)
    return truth, grid, 1.0 - mask


@dataclass
class EvalReport:
    """RMSE scorecard for one experiment."""

    method: str
    rmse_db: float
    abs_errors: np.ndarray
    runtime_s: float = 0.0
    runtime_normalized: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abs_errors = np.asarray(self.abs_errors, dtype=float)
        if self.rmse_db < 0:
            raise ValueError("rmse must be non-negative")
        if self.abs_errors.size:
            check = float(np.sqrt(np.mean(self.abs_errors ** 2)))
            if not np.isclose(check, self.rmse_db, rtol=1e-9, atol=1e-12):
                raise ValueError("rmse inconsistent with per-cell errors")


def evaluate(predicted, truth, eval_mask, method: str = "",
             runtime_s: float = 0.0, metadata: dict | None = None) -> EvalReport:
    """RMSE of `predicted` against `truth` over eval_mask==1 cells."""
    values = getattr(predicted, "values", predicted)
    values = np.asarray(values, dtype=float)
    truth = np.asarray(truth, dtype=float)
    sel = np.asarray(eval_mask, dtype=float) == 1.0
    if not sel.any():
        raise ValueError("evaluation mask selects no cells")
    err = np.abs(values[sel] - truth[sel])
    rmse = float(np.sqrt(np.mean(err ** 2)))
    return EvalReport(method, rmse, err, runtime_s, None, metadata or {})


def _fit_normalizer(train_grid: ChannelGrid) -> Normalizer:
    # offset at the minimum keeps normalized targets non-negative, which the
    # final ReLU can represent; scale by the spread
    vals = train_grid.valid_values()
    scale = float(np.std(vals))
    return Normalizer(float(vals.min()), scale if scale > 0 else 1.0)


def two_step_train(grid: ChannelGrid, knn_cfg: KnnConfig, structure,
                   train_cfg: TrainConfig, seed,
                   split_fraction: float = 0.8, final_relu: bool = True):
    """Step II training: split V into T/L, KNN-fill T, fit the network on L.

    Returns (net, loss_log, train_seconds); the seconds cover only the
    optimization loop, matching how runtimes are normalized in the sweep.
    """
    layers = parse_structure(structure) if isinstance(structure, str) else structure
    train_grid, label_mask = split_valid(grid, split_fraction, seed)
    coarse = knn_fill(train_grid, knn_cfg)
    net = ConvNet.create(layers, in_tiers=2,
                         seed=np.random.SeedSequence([int(seed), 1]),
                         final_relu=final_relu)
    net.normalizer = _fit_normalizer(train_grid)
    stack = pad_input(net.normalizer.normalize(coarse.values),
                      train_grid.mask, net)
    start = time.perf_counter()
    log = train_network(net, stack, grid.values, label_mask, train_cfg)
    elapsed = time.perf_counter() - start
    return net, log, elapsed


def two_step_interpolate(grid: ChannelGrid, net: ConvNet,
                         knn_cfg: KnnConfig) -> ChannelGrid:
    """Assemble the final database G = (1 - M) * N(K(D, M), M) + D.

    Valid cells come from D unchanged (bit-identical); invalid cells take
    the network refinement of the KNN coarse fill.
    """
    if net.trained_shape is not None and tuple(net.trained_shape) != grid.spec.shape:
        raise ValueError(
            f"network was trained on grid {net.trained_shape}, "
            f"got {grid.spec.shape}"
        )
    coarse = knn_fill(grid, knn_cfg)
    vals = coarse.values
    if net.normalizer is not None:
        vals = net.normalizer.normalize(vals)
    out = forward(net, pad_input(vals, grid.mask, net))
    if out.shape != grid.spec.shape:
        raise ValueError(
            f"network output {out.shape} does not match grid {grid.spec.shape}"
        )
    if net.normalizer is not None:
        out = net.normalizer.denormalize(out)
    final = np.where(grid.mask == 1.0, grid.values, out)
    return ChannelGrid(grid.spec, final, np.ones(grid.spec.shape))


def _mlp_create(widths, seed):
    rng = np.random.default_rng(seed)
    sizes = [2, *widths, 1]
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        params.append(np.zeros(fan_out))
    return params


def _mlp_forward(params, x):
    pres = []
    act = x
    n_layers = len(params) // 2
    for li in range(n_layers):
        pre = act @ params[2 * li] + params[2 * li + 1]
        pres.append((act, pre))
        act = np.maximum(pre, 0.0) if li < n_layers - 1 else pre
    return act, pres


def _mlp_grads(params, x, y):
    out, pres = _mlp_forward(params, x)
    diff = out - y
    loss = float((diff * diff).sum())
    grads = [None] * len(params)
    d = 2.0 * diff
    n_layers = len(params) // 2
    for li in range(n_layers - 1, -1, -1):
        act, pre = pres[li]
        if li < n_layers - 1:
            d = d * (pre > 0)
        grads[2 * li] = act.T @ d
        grads[2 * li + 1] = d.sum(axis=0)
        if li > 0:
            d = d @ params[2 * li].T
    return loss, grads


def fullnn_baseline(samples, eval_xy, eval_gains, hidden=(10, 10),
                    cfg: TrainConfig | None = None, seed=0) -> EvalReport:
    """Coordinate-in, gain-out fully connected regression baseline.

    Trains an MLP with ReLU hidden layers on the given samples (full batch,
    Adam) and scores RMSE at the evaluation coordinates. Exists purely as a
    comparison point for the grid-based methods.
    """
    cfg = cfg or TrainConfig()
    xs = np.array([[s.x1, s.x2] for s in samples], dtype=float)
    ys = np.array([s.gain_db for s in samples], dtype=float)[:, None]
    if len(xs) < 2:
        raise ValueError("need at least 2 training samples")
    x_mu, x_sd = xs.mean(axis=0), xs.std(axis=0)
    x_sd[x_sd == 0] = 1.0
    y_mu, y_sd = float(ys.mean()), float(ys.std()) or 1.0
    xn = (xs - x_mu) / x_sd
    yn = (ys - y_mu) / y_sd

    params = _mlp_create(tuple(hidden), seed)
    state = AdamState.create(params, lr=cfg.lr, beta1=cfg.beta1,
                             beta2=cfg.beta2, eps=cfg.eps)
    start = time.perf_counter()
    for _ in range(cfg.iterations):
        _, grads = _mlp_grads(params, xn, yn)
        adam_step(state, params, grads)
    elapsed = time.perf_counter() - start

    eval_xy = np.asarray(eval_xy, dtype=float)
    eval_gains = np.asarray(eval_gains, dtype=float)
    pred_n, _ = _mlp_forward(params, (eval_xy - x_mu) / x_sd)
    pred = y_mu + y_sd * pred_n[:, 0]
    err = np.abs(pred - eval_gains)
    rmse = float(np.sqrt(np.mean(err ** 2)))
    return EvalReport("fullnn-baseline", rmse, err, elapsed,
                      metadata={"hidden": tuple(hidden),
                                "iterations": cfg.iterations, "seed": seed})


_METHODS = ("gp", "knn-uniform", "knn-distance", "two-step", "fullnn-baseline")


@dataclass
class ExperimentConfig:
    """One experiment: a data source, a method, and its parameters.

    The data source is either the synthetic field described by the spec
    fields below (default: the reference benchmark) or a grid/truth CSV
    triple. Exactly one method runs per config.
    """

    method: str = "two-step"
    # synthetic source (ignored when grid_csv is given)
    height: int = 80
    width: int = 80
    q: float = 0.5
    bs_row: float | None = None
    bs_col: float | None = None
    g0: float = 0.0
    eta: float = 3.5
    d0_cells: float = 6.0
    sigma_psi: float = 8.0
    sigma_zeta: float = 2.0
    valid_fraction: float = 0.5
    seed: int = 1
    # file source
    grid_csv: str | None = None
    mask_csv: str | None = None
    truth_csv: str | None = None
    # knn parameters
    k: int = 5
    weighting: str = "uniform"
    # gp parameters
    n_range: int = 4
    gp_fit: bool = True
    gp_g0: float | None = None
    gp_eta: float | None = None
    gp_d0: float | None = None
    gp_total_var: float | None = None
    gp_sigma_psi_sq: float | None = None
    d_min: float = 1.0
    d_max: float = 50.0
    d_step: float = 1.0
    # network parameters
    structure: str = "9-1-5(16-8-1)"
    iterations: int = 20_000
    lr: float = 1e-4
    split_fraction: float = 0.8
    final_relu: bool = True
    log_every: int = 1
    hidden: str = "10-10"

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.grid_csv is not None:
            for p in (self.grid_csv, self.mask_csv, self.truth_csv):
                if p is not None and not Path(p).exists():
                    raise ValueError(f"referenced file does not exist: {p}")
            if self.truth_csv is None:
                raise ValueError("file-based experiments need truth_csv for scoring")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in d.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Parse a flat key=value config file ('#' starts a comment)."""
        d = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, val = line.split("=", 1)
                d[key.strip()] = val.strip()
        return cls.from_dict(d)


def _coerce(type_str, raw):
    """Convert a config-file string to the annotated field type."""
    if not isinstance(raw, str):
        return raw
    base = str(type_str).replace(" | None", "").strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if base == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    return raw


def _source_data(config: ExperimentConfig):
    """Materialize (truth, grid, eval_mask, bs_position) for a config."""
    if config.grid_csv is not None:
        grid = read_grid(config.grid_csv, config.mask_csv, q=config.q)
        truth = read_grid_csv(config.truth_csv)
        if truth.shape != grid.spec.shape:
            raise ValueError("truth shape does not match the grid")
        eval_mask = 1.0 - grid.mask
        bs = (config.bs_row, config.bs_col)
    else:
        h, w = config.height, config.width
        spec = GridSpec(0.0, (h - 1) * config.q, 0.0, (w - 1) * config.q, config.q)
        bs = (
            config.bs_row if config.bs_row is not None else (h - 1) / 2.0,
            config.bs_col if config.bs_col is not None else (w - 1) / 2.0,
        )
        params = FieldParams(config.g0, config.eta, config.d0_cells,
                             config.sigma_psi, config.sigma_zeta, bs)
        truth, grid, eval_mask = benchmark_instance(
            config.seed, params, spec, config.valid_fraction
        )
    return truth, grid, eval_mask, bs


def _gp_params(config: ExperimentConfig, grid, bs) -> GpParams:
    explicit = (config.gp_g0, config.gp_eta, config.gp_d0, config.gp_total_var)
    if config.gp_fit:
        if bs[0] is None or bs[1] is None:
            raise ValueError("gp fitting needs bs_row/bs_col")
        fitted = fit_gp(grid, bs, Neighborhood(config.n_range),
                        config.d_min, config.d_max, config.d_step)
        return replace(
            fitted,
            g0=explicit[0] if explicit[0] is not None else fitted.g0,
            eta=explicit[1] if explicit[1] is not None else fitted.eta,
            d0=explicit[2] if explicit[2] is not None else fitted.d0,
            total_var=explicit[3] if explicit[3] is not None else fitted.total_var,
            sigma_psi_sq=config.gp_sigma_psi_sq,
        )
    if any(v is None for v in explicit):
        raise ValueError("gp_fit=false requires gp_g0, gp_eta, gp_d0, gp_total_var")
    if bs[0] is None or bs[1] is None:
        raise ValueError("gp prediction needs bs_row/bs_col")
    return GpParams(explicit[0], explicit[1], explicit[2], explicit[3],
                    (bs[0], bs[1]), config.gp_sigma_psi_sq)


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Run one configured experiment and score it on its evaluation set."""
    truth, grid, eval_mask, bs = _source_data(config)

    if config.method in ("knn-uniform", "knn-distance"):
        knn_cfg = KnnConfig(
            config.k,
            "uniform" if config.method == "knn-uniform" else "inverse-distance",
        )
        start = time.perf_counter()
        filled = knn_fill(grid, knn_cfg)
        elapsed = time.perf_counter() - start
        return evaluate(filled, truth, eval_mask, config.method, elapsed,
                        {"k": config.k, "weighting": knn_cfg.weighting,
                         "seed": config.seed})

    if config.method == "gp":
        nbhd = Neighborhood(config.n_range)
        start = time.perf_counter()
        params = _gp_params(config, grid, bs)
        filled = gp_interpolate(grid, params, nbhd)
        elapsed = time.perf_counter() - start
        return evaluate(filled, truth, eval_mask, "gp", elapsed,
                        {"params": params, "n_range": config.n_range,
                         "fitted": config.gp_fit, "seed": config.seed})

    if config.method == "two-step":
        knn_cfg = KnnConfig(config.k, config.weighting)
        train_cfg = TrainConfig(iterations=config.iterations, lr=config.lr,
                                log_every=config.log_every)
        net, log, train_s = two_step_train(
            grid, knn_cfg, config.structure, train_cfg, config.seed,
            config.split_fraction, config.final_relu,
        )
        filled = two_step_interpolate(grid, net, knn_cfg)
        return evaluate(
            filled, truth, eval_mask, "two-step", train_s,
            {"structure": structure_string(net.layers),
             "iterations": config.iterations, "lr": config.lr,
             "seed": config.seed, "loss_log": log,
             "k": config.k, "weighting": config.weighting},
        )

    # fullnn-baseline
    cells = grid.valid_cells()
    samples = [
        Sample(*grid.spec.cell_center(int(i), int(j)), grid.values[i, j])
        for i, j in cells
    ]
    eval_cells = np.argwhere(np.asarray(eval_mask) == 1.0)
    eval_xy = np.array([grid.spec.cell_center(int(i), int(j))
                        for i, j in eval_cells])
    eval_gains = truth[eval_cells[:, 0], eval_cells[:, 1]]
    hidden = tuple(int(tok) for tok in str(config.hidden).split("-"))
    cfg = TrainConfig(iterations=config.iterations, lr=config.lr)
    report = fullnn_baseline(samples, eval_xy, eval_gains, hidden, cfg,
                             config.seed)
    report.metadata["seed"] = config.seed
    return report


def sweep(configs) -> list[EvalReport]:
    """Run a list of experiments and normalize runtimes by the reference
    9-1-5(64-32-1) two-step run, which must be part of the sweep."""
    reports = [run_experiment(c) for c in configs]
    ref = None
    for r in reports:
        if r.method == "two-step" and r.metadata.get("structure") == REFERENCE_STRUCTURE:
            ref = r
            break
    if ref is None or ref.runtime_s <= 0:
        raise ValueError(
            f"sweep needs a two-step run with the {REFERENCE_STRUCTURE} "
            "reference structure for runtime normalization"
        )
    for r in reports:
        r.runtime_normalized = r.runtime_s / ref.runtime_s
    return reports


def default_sweep_configs(base: ExperimentConfig | None = None,
                          filters=(32, 64, 128, 256)) -> list[ExperimentConfig]:
    """The structure sweep: five filter-size chains crossed with first-layer
    tier counts; tier counts halve layer by layer down to the single output
    tier."""
    base = base or ExperimentConfig(method="two-step")
    shapes = ("9-1-5", "9-3-5", "9-5-5", "9-3-3-5", "9-3-3-3-5")
    configs = []
    for shape in shapes:
        n_layers = len(shape.split("-"))
        for first in filters:
            tiers = [max(first >> i, 1) for i in range(n_layers - 1)] + [1]
            structure = f"{shape}({'-'.join(str(t) for t in tiers)})"
            configs.append(replace(base, method="two-step", structure=structure))
    return configs
