"""Command-line front end.

One subcommand per study type plus two utilities::

    filamentlab simulate       config.ini [--seed N] [--threads K] [--out-dir D]
    filamentlab converge-n     config.ini ...
    filamentlab converge-delta config.ini ...
    filamentlab mean-field     config.ini ...
    filamentlab constants      config.ini ...
    filamentlab metric         a.vfil b.vfil [--seed N] [--out-dir D]

Exit codes: 0 on success, 2 when inputs fail validation, 3 when a run
aborts numerically (step rejection, diverged tracers, and the like).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .currents import metric_estimate
from .errors import NumericalError, PreconditionError
from .harness import (
    RunReport,
    SeriesPlot,
    emit_outputs,
    load_config,
    run_convergence_delta,
    run_convergence_n,
    run_mean_field,
    run_simulate,
    stability_constant,
)
from .kernel import BiotSavartParams, kernel_constants_sweep
from .snapshots import read_filaments, write_metric_csv

_RUNNERS = {
    "simulate": run_simulate,
    "converge-n": run_convergence_n,
    "converge-delta": run_convergence_delta,
    "mean-field": run_mean_field,
}


def _add_config_args(p):
    p.add_argument("config", help="scenario INI file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="override the thread count")
    p.add_argument("--out-dir", default=None, help="override the output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="filamentlab",
        description="Vortex filament studies: simulation, convergence, and metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run one ensemble and emit trajectory plus conservation checks",
        "converge-n": "ensemble-size convergence against a fine reference",
        "converge-delta": "kernel-width stability sweep on a spectral grid",
        "mean-field": "width schedule selection and the combined error bound",
    }
    for name in _RUNNERS:
        _add_config_args(sub.add_parser(name, help=helps[name]))
    _add_config_args(
        sub.add_parser("constants", help="kernel constants and growth bounds per width")
    )
    pm = sub.add_parser("metric", help="distance estimate between two saved currents")
    pm.add_argument("first", help="filament/current file")
    pm.add_argument("second", help="filament/current file")
    pm.add_argument("--seed", type=int, default=0, help="dictionary search seed")
    pm.add_argument("--out-dir", default=None, help="also write metric.csv here")
    return parser


def _run_constants(cfg):
    """Constants table across the configured widths, plus per-width mass profiles."""
    report = RunReport(
        scenario="constants",
        config_text=cfg.render(),
        seed=cfg.seed,
        out_dir=cfg.out_dir,
        threads=cfg.threads,
    )
    consts, slopes = kernel_constants_sweep(
        cfg.profile(), cfg.deltas, params=BiotSavartParams(gamma=cfg.gamma)
    )
    rows = []
    for kc in consts:
        sc = stability_constant(kc, cfg.mf_stability_radius, cfg.horizon)
        rows.append(
            (kc.delta, kc.c0, kc.c1, kc.c2, sc.log_c_star, sc.log_c_lower_star, sc.log_c_delta_r)
        )
    report.tables["constants"] = (
        ("delta", "c0", "c1", "c2", "log_c_star", "log_c_lower_star", "log_c_delta_r"),
        rows,
    )
    ds = [kc.delta for kc in consts]
    report.plots.append(
        SeriesPlot(
            name="constants_vs_delta",
            x_label="delta",
            y_label="kernel sup norms",
            series=[
                ("c0", ds, [kc.c0 for kc in consts]),
                ("c1", ds, [kc.c1 for kc in consts]),
                ("c2", ds, [kc.c2 for kc in consts]),
            ],
            log_x=True,
            log_y=True,
        )
    )
    report.summary = {
        "fitted_slopes": dict(slopes),
        "stability_radius": cfg.mf_stability_radius,
        "horizon": cfg.horizon,
    }
    return report


def _cmd_metric(args):
    xi, _ = read_filaments(args.first)
    xi_tilde, _ = read_filaments(args.second)
    est = metric_estimate(xi, xi_tilde, seed=args.seed)
    print(f"lower = {est.lower!r}")
    print(f"upper = {est.upper!r}")
    print(f"method = {est.method}")
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_csv(out / "metric.csv", [(0.0, est.lower, est.upper, est.method)])
        print(f"wrote {out / 'metric.csv'}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metric":
            return _cmd_metric(args)
        cfg = load_config(
            args.config, seed=args.seed, threads=args.threads, out_dir=args.out_dir
        )
        if args.command == "constants":
            report = _run_constants(cfg)
        else:
            report = _RUNNERS[args.command](cfg)
        paths = emit_outputs(report)
        if args.command == "constants":
            out = Path(cfg.out_dir)
            for d in cfg.deltas:
                mass_path = out / f"mass_delta_{d:g}.csv"
                cfg.kernel(d).export_mass_csv(mass_path)
                paths.append(mass_path)
        for p in sorted(paths):
            print(f"wrote {p}")
        return 0
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
