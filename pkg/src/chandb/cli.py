"""Command line interface.

Subcommands cover the full workflow: generate a synthetic field (synth),
grid scattered samples (build), fit the channel model (fit), complete a
database (interpolate), train the refinement network (train), score methods
on an experiment config (eval), and run the structure/runtime sweep (sweep).
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys

import numpy as np

from . import io
from .convnet import TrainConfig, save_model
from .field_synth import FieldParams, field_to_samples, synth_field
from .gp_model import (
    GpParams,
    Neighborhood,
    fit_gp,
    fit_pathloss,
    fit_d0,
    gp_interpolate_detailed,
    residual_fading,
)
from .grid import GridSpec, build_grid
from .knn import KnnConfig, knn_fill
from .pipeline import (
    ExperimentConfig,
    default_sweep_configs,
    run_experiment,
    sweep,
    two_step_interpolate,
    two_step_train,
)

__all__ = ["main"]


def _spec_args(p):
    p.add_argument("--height", type=int, default=80)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--q", type=float, default=0.5, help="cell size in meters")
    p.add_argument("--x1-min", type=float, default=0.0)
    p.add_argument("--x2-min", type=float, default=0.0)


def _grid_input_args(p):
    p.add_argument("--grid", required=True, help="values CSV")
    p.add_argument("--mask", default=None,
                   help="mask CSV (default: sibling .mask.csv)")
    p.add_argument("--q", type=float, default=1.0, help="cell size in meters")


def _make_spec(args) -> GridSpec:
    return GridSpec(
        args.x1_min, args.x1_min + (args.height - 1) * args.q,
        args.x2_min, args.x2_min + (args.width - 1) * args.q, args.q,
    )


def _bs(args, shape):
    row = args.bs_row if args.bs_row is not None else (shape[0] - 1) / 2.0
    col = args.bs_col if args.bs_col is not None else (shape[1] - 1) / 2.0
    return (row, col)


def _cmd_synth(args):
    spec = _make_spec(args)
    params = FieldParams(args.g0, args.eta, args.d0, args.sigma_psi,
                         args.sigma_zeta, _bs(args, spec.shape))
    field = synth_field(params, spec, args.seed)
    io.write_grid_csv(args.out, field)
    print(f"wrote {spec.height}x{spec.width} field to {args.out}")
    if args.samples_out:
        sample_seed = args.sample_seed if args.sample_seed is not None else args.seed
        samples = field_to_samples(spec, field, args.keep_fraction, sample_seed)
        io.write_samples_csv(args.samples_out, samples)
        print(f"wrote {len(samples)} samples to {args.samples_out}")
        if args.grid_out:
            mask_path = io.write_grid(args.grid_out, build_grid(spec, samples))
            print(f"wrote sampled grid to {args.grid_out} (+ {mask_path})")
    if args.pgm:
        io.write_pgm(args.pgm, field)
        print(f"wrote heatmap to {args.pgm}")
    return 0


def _cmd_build(args):
    samples = io.read_samples_csv(args.samples)
    if args.x1_max is None or args.x2_max is None:
        xs1 = [s.x1 for s in samples]
        xs2 = [s.x2 for s in samples]
        spec = GridSpec(min(xs1), max(xs1), min(xs2), max(xs2), args.q)
    else:
        spec = GridSpec(args.x1_min, args.x1_max, args.x2_min, args.x2_max, args.q)
    grid = build_grid(spec, samples)
    mask_path = io.write_grid(args.out, grid, args.mask_out)
    print(f"gridded {len(samples)} samples onto {spec.height}x{spec.width} "
          f"({grid.num_valid} valid cells); wrote {args.out} (+ {mask_path})")
    if args.pgm:
        io.write_pgm(args.pgm, grid.values, grid.mask)
    return 0


def _cmd_fit(args):
    grid = io.read_grid(args.grid, args.mask, q=args.q)
    bs = _bs(args, grid.spec.shape)
    params = fit_gp(grid, bs, Neighborhood(args.n_range),
                    args.d_min, args.d_max, args.d_step)
    print(f"g0={params.g0:.6g}")
    print(f"eta={params.eta:.6g}")
    print(f"d0={params.d0:.6g}")
    print(f"total_var={params.total_var:.6g}")
    return 0


def _cmd_interpolate(args):
    grid = io.read_grid(args.grid, args.mask, q=args.q)
    if args.method == "knn":
        filled = knn_fill(grid, KnnConfig(args.k, args.weighting))
        mse = None
    else:
        bs = _bs(args, grid.spec.shape)
        nbhd = Neighborhood(args.n_range)
        given = (args.g0, args.eta, args.d0, args.total_var)
        if all(v is not None for v in given):
            params = GpParams(*given, bs, args.sigma_psi_sq)
        else:
            g0, eta = fit_pathloss(grid, bs)
            _, total_var = residual_fading(grid, g0, eta, bs)
            d0 = fit_d0(grid, g0, eta, total_var, nbhd, bs,
                        args.d_min, args.d_max, args.d_step)
            params = GpParams(
                g0 if args.g0 is None else args.g0,
                eta if args.eta is None else args.eta,
                d0 if args.d0 is None else args.d0,
                total_var if args.total_var is None else args.total_var,
                bs, args.sigma_psi_sq,
            )
            print(f"fitted: g0={params.g0:.4g} eta={params.eta:.4g} "
                  f"d0={params.d0:.4g} total_var={params.total_var:.4g}")
        filled, mse, fallback = gp_interpolate_detailed(grid, params, nbhd)
        if fallback.any():
            print(f"{int(fallback.sum())} cells had no valid neighbor and "
                  "fell back to the path-loss mean")
    mask_path = io.write_grid(args.out, filled)
    print(f"wrote completed grid to {args.out} (+ {mask_path})")
    if args.method == "gp" and args.mse_out:
        io.write_grid_csv(args.mse_out, mse)
        print(f"wrote per-cell predicted MSE to {args.mse_out}")
    if args.pgm:
        io.write_pgm(args.pgm, filled.values)
    return 0


def _cmd_train(args):
    grid = io.read_grid(args.grid, args.mask, q=args.q)
    cfg = TrainConfig(iterations=args.iterations, lr=args.lr,
                      log_every=args.log_every)
    net, log, seconds = two_step_train(
        grid, KnnConfig(args.k, args.weighting), args.structure, cfg,
        args.seed, args.split_fraction, final_relu=not args.no_final_relu,
    )
    save_model(args.model_out, net)
    print(f"trained {args.structure} for {args.iterations} iterations "
          f"in {seconds:.1f} s; model saved to {args.model_out}")
    if log.size:
        print(f"label RMSE: {log[0, 1]:.4f} dB (start) -> "
              f"{log[-1, 1]:.4f} dB (iteration {int(log[-1, 0])})")
    if args.loss_log:
        np.savetxt(args.loss_log, log, delimiter=",", fmt="%.17g",
                   header="iteration,rmse_db", comments="")
        print(f"wrote loss log to {args.loss_log}")
    if args.out:
        filled = two_step_interpolate(grid, net, KnnConfig(args.k, args.weighting))
        mask_path = io.write_grid(args.out, filled)
        print(f"wrote completed grid to {args.out} (+ {mask_path})")
    return 0


_EVAL_OVERRIDES = (
    "method", "k", "weighting", "structure", "iterations", "lr", "n_range",
    "height", "width", "q", "g0", "eta", "d0_cells", "sigma_psi",
    "sigma_zeta", "valid_fraction", "split_fraction", "d_min", "d_max",
    "d_step", "final_relu", "hidden", "gp_fit", "gp_g0", "gp_eta", "gp_d0",
    "gp_total_var", "gp_sigma_psi_sq", "grid_csv", "mask_csv", "truth_csv",
    "log_every",
)


def _config_from_args(args) -> list[ExperimentConfig]:
    from dataclasses import replace

    base = (ExperimentConfig.from_file(args.config) if args.config
            else ExperimentConfig())
    overrides = {}
    for name in _EVAL_OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if overrides:
        base = replace(base, **overrides)
    if args.seeds:
        seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = [base.seed]
    return [replace(base, seed=s) for s in seeds]


_TABLE_FIELDS = ("method", "structure", "k", "seed", "rmse_db",
                 "runtime_s", "runtime_normalized")


def _report_row(r):
    return {
        "method": r.method,
        "structure": str(r.metadata.get("structure", "")),
        "k": str(r.metadata.get("k", "")),
        "seed": str(r.metadata.get("seed", "")),
        "rmse_db": f"{r.rmse_db:.6f}",
        "runtime_s": f"{r.runtime_s:.3f}",
        "runtime_normalized": (
            f"{r.runtime_normalized:.2f}" if r.runtime_normalized is not None else ""
        ),
    }


def _print_table(reports, csv_path=None):
    rows = [_report_row(r) for r in reports]
    widths = {f: max(len(f), *(len(row[f]) for row in rows)) for f in _TABLE_FIELDS}
    print("  ".join(f.ljust(widths[f]) for f in _TABLE_FIELDS))
    for row in rows:
        print("  ".join(row[f].ljust(widths[f]) for f in _TABLE_FIELDS))
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_TABLE_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote table to {csv_path}")


def _cmd_eval(args):
    configs = _config_from_args(args)
    reports = [run_experiment(c) for c in configs]
    _print_table(reports, args.csv)
    if len(reports) > 1:
        med = statistics.median(r.rmse_db for r in reports)
        print(f"median rmse_db over {len(reports)} seeds: {med:.6f}")
    if args.loss_log and reports and "loss_log" in reports[0].metadata:
        np.savetxt(args.loss_log, reports[0].metadata["loss_log"],
                   delimiter=",", fmt="%.17g", header="iteration,rmse_db",
                   comments="")
        print(f"wrote loss log of the first run to {args.loss_log}")
    return 0


def _cmd_sweep(args):
    base = (ExperimentConfig.from_file(args.config) if args.config
            else ExperimentConfig())
    from dataclasses import replace

    overrides = {}
    for name in ("iterations", "lr", "k", "weighting", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if overrides:
        base = replace(base, **overrides)
    filters = tuple(int(tok) for tok in args.filters.split(","))
    configs = default_sweep_configs(base, filters)
    if args.structures:
        wanted = [tok.strip() for tok in args.structures.split(",")]
        configs = [c for c in configs
                   if c.structure.split("(")[0] in wanted]
    reports = sweep(configs)
    _print_table(reports, args.csv)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chandb",
        description="Build, synthesize and complete channel-gain databases.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth field")
    _spec_args(p)
    p.add_argument("--bs-row", type=float, default=None, help="BS row in cells")
    p.add_argument("--bs-col", type=float, default=None, help="BS col in cells")
    p.add_argument("--g0", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=3.5)
    p.add_argument("--d0", type=float, default=6.0, help="correlation distance, cells")
    p.add_argument("--sigma-psi", type=float, default=8.0)
    p.add_argument("--sigma-zeta", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="ground-truth CSV path")
    p.add_argument("--samples-out", default=None, help="sampled-subset CSV path")
    p.add_argument("--keep-fraction", type=float, default=0.5)
    p.add_argument("--sample-seed", type=int, default=None)
    p.add_argument("--grid-out", default=None,
                   help="also grid the samples and write values+mask CSVs")
    p.add_argument("--pgm", default=None, help="heatmap output path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build", help="grid a sample CSV into values+mask CSVs")
    p.add_argument("--samples", required=True)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--x1-min", type=float, default=0.0)
    p.add_argument("--x1-max", type=float, default=None)
    p.add_argument("--x2-min", type=float, default=0.0)
    p.add_argument("--x2-max", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", default=None)
    p.add_argument("--pgm", default=None)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("fit", help="fit g0, eta, d0, total_var from a grid")
    _grid_input_args(p)
    p.add_argument("--bs-row", type=float, default=None)
    p.add_argument("--bs-col", type=float, default=None)
    p.add_argument("--n-range", type=int, default=4)
    p.add_argument("--d-min", type=float, default=1.0)
    p.add_argument("--d-max", type=float, default=50.0)
    p.add_argument("--d-step", type=float, default=1.0)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("interpolate", help="complete a grid with gp or knn")
    _grid_input_args(p)
    p.add_argument("--method", choices=("gp", "knn"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--weighting", choices=("uniform", "inverse-distance"),
                   default="uniform")
    p.add_argument("--bs-row", type=float, default=None)
    p.add_argument("--bs-col", type=float, default=None)
    p.add_argument("--n-range", type=int, default=4)
    p.add_argument("--g0", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--d0", type=float, default=None)
    p.add_argument("--total-var", type=float, default=None)
    p.add_argument("--sigma-psi-sq", type=float, default=None)
    p.add_argument("--d-min", type=float, default=1.0)
    p.add_argument("--d-max", type=float, default=50.0)
    p.add_argument("--d-step", type=float, default=1.0)
    p.add_argument("--mse-out", default=None)
    p.add_argument("--pgm", default=None)
    p.set_defaults(func=_cmd_interpolate)

    p = sub.add_parser("train", help="train the two-step refinement network")
    _grid_input_args(p)
    p.add_argument("--structure", default="9-1-5(64-32-1)")
    p.add_argument("--iterations", type=int, default=20_000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--weighting", choices=("uniform", "inverse-distance"),
                   default="uniform")
    p.add_argument("--no-final-relu", action="store_true",
                   help="drop the ReLU after the last layer")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--model-out", required=True)
    p.add_argument("--loss-log", default=None)
    p.add_argument("--out", default=None, help="also write the completed grid")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="run configured experiments and report RMSE")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--method", choices=(
        "gp", "knn-uniform", "knn-distance", "two-step", "fullnn-baseline",
    ), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--weighting", choices=("uniform", "inverse-distance"),
                   default=None)
    p.add_argument("--structure", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--n-range", dest="n_range", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--g0", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--d0-cells", dest="d0_cells", type=float, default=None)
    p.add_argument("--sigma-psi", dest="sigma_psi", type=float, default=None)
    p.add_argument("--sigma-zeta", dest="sigma_zeta", type=float, default=None)
    p.add_argument("--valid-fraction", dest="valid_fraction", type=float,
                   default=None)
    p.add_argument("--split-fraction", dest="split_fraction", type=float,
                   default=None)
    p.add_argument("--hidden", default=None)
    p.add_argument("--final-relu", dest="final_relu",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gp-fit", dest="gp_fit",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gp-g0", dest="gp_g0", type=float, default=None)
    p.add_argument("--gp-eta", dest="gp_eta", type=float, default=None)
    p.add_argument("--gp-d0", dest="gp_d0", type=float, default=None)
    p.add_argument("--gp-total-var", dest="gp_total_var", type=float, default=None)
    p.add_argument("--gp-sigma-psi-sq", dest="gp_sigma_psi_sq", type=float,
                   default=None)
    p.add_argument("--d-min", dest="d_min", type=float, default=None)
    p.add_argument("--d-max", dest="d_max", type=float, default=None)
    p.add_argument("--d-step", dest="d_step", type=float, default=None)
    p.add_argument("--grid-csv", dest="grid_csv", default=None)
    p.add_argument("--mask-csv", dest="mask_csv", default=None)
    p.add_argument("--truth-csv", dest="truth_csv", default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    p.add_argument("--loss-log", default=None)
    p.add_argument("--csv", default=None, help="write the result table as CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="structure/runtime sweep of the two-step method")
    p.add_argument("--config", default=None)
    p.add_argument("--filters", default="32,64,128,256")
    p.add_argument("--structures", default=None,
                   help="comma-separated subset, e.g. '9-1-5,9-3-5'")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--weighting", choices=("uniform", "inverse-distance"),
                   default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
