"""Command-line entry point: ``countiptw <subcommand> ...``.

Errors are reported on stderr as a single ``error: <Kind>: <message>`` line
with exit status 1; argument errors exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from .data_model import WEIGHTING_METHODS, EnergySettings, GbmSettings, MethodId, load_scenario_config, read_dataset_csv


def _cmd_simulate(args) -> None:
    from .harness import run_scenario

    cfg = load_scenario_config(args.config)
    if args.reps is not None:
        cfg = dataclasses.replace(cfg, n_reps=args.reps)
    run = run_scenario(cfg, workers=args.workers, out_dir=args.out)
    for key, path in run.files.items():
        print(f"{key}\t{path}")
    for method, count in sorted(run.failures().items()):
        print(f"failures\t{method}\t{count}")


def _cmd_calibrate(args) -> None:
    from .missingness import plan_for_scenario, plan_to_toml

    cfg = load_scenario_config(args.config)
    plan = plan_for_scenario(cfg)
    if plan is None:
        raise ValueError("scenario has missingness = none; nothing to calibrate")
    Path(args.out).write_text(plan_to_toml(plan), encoding="utf-8")
    print(f"plan\t{args.out}")


def _settings(config_path):
    if config_path is None:
        return GbmSettings(), EnergySettings()
    cfg = load_scenario_config(config_path)
    return cfg.gbm, cfg.energy


def _cmd_weights(args) -> None:
    from .weights import compute_weights, winsorise

    ds = read_dataset_csv(args.data)
    gbm, energy = _settings(args.config)
    wv = compute_weights(ds, MethodId(args.method), gbm, energy)
    if args.winsorize < 1.0:
        wv = winsorise(wv, args.winsorize)
    nan = np.full(ds.n, math.nan)
    num = wv.numerator if wv.numerator is not None else nan
    den = wv.denominator if wv.denominator is not None else nan
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "weight", "numerator", "denominator"])
        for i in range(ds.n):
            w.writerow([i + 1, repr(float(wv.w[i])),
                        "" if math.isnan(num[i]) else repr(float(num[i])),
                        "" if math.isnan(den[i]) else repr(float(den[i]))])
    print(f"weights\t{args.out}")


def read_weights_csv(path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or "weight" not in header:
            raise ValueError(f"{path}:1: no 'weight' column")
        j = header.index("weight")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(float(row[j]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed weight") from None
    return np.asarray(out)


DIAGNOSE_COLUMNS = ("n", "ess", "rho_c1", "rho_c2", "rho_c3", "mean_abs_rho", "d_w", "dcov_w",
                    "eps_a", "eps_c", "eps_c_joint")


def _cmd_diagnose(args) -> None:
    from .diagnostics import weight_diagnostics

    ds = read_dataset_csv(args.data)
    if not ds.is_complete:
        raise ValueError("diagnostics need a complete dataset")
    w = read_weights_csv(args.weights)
    if w.size != ds.n:
        raise ValueError(f"{ds.n} data rows but {w.size} weights")
    d = weight_diagnostics(ds.a, ds.covariates, w, level=args.level)
    values = [ds.n, d.ess, *d.rho_w, d.mean_abs_rho, d.d_w, d.dcov_w, d.eps_a, d.eps_c, d.eps_c_joint]
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(DIAGNOSE_COLUMNS)
        wr.writerow(["" if isinstance(v, float) and math.isnan(v) else repr(v) if isinstance(v, float) else v
                     for v in values])
    print(format_diagnostics(ds.n, d))
    print(f"diagnostics\t{args.out}")


def format_diagnostics(n: int, d) -> str:
    """Human-readable balance report."""
    def num(x, spec=".6g"):
        return "n/a" if isinstance(x, float) and math.isnan(x) else format(x, spec)

    lines = [
        f"rows                 {n}",
        f"ESS                  {num(d.ess, '.1f')}  ({num(d.ess / n, '.3f')} of n)",
    ]
    for name, r in zip(("c1", "c2", "c3"), d.rho_w):
        lines.append(f"|rho_w(a, {name})|       {num(abs(r), '.4f')}")
    lines += [
        f"mean |rho_w|         {num(d.mean_abs_rho, '.4f')}",
        f"D_w                  {num(d.d_w)}",
        f"  dcov_w             {num(d.dcov_w)}",
        f"  eps_C (joint)      {num(d.eps_c_joint)}",
        f"  eps_A              {num(d.eps_a)}",
        f"eps_C (1-D mean)     {num(d.eps_c)}",
    ]
    return "\n".join(lines)


def _cmd_aggregate(args) -> None:
    from .harness import aggregate, write_perf_csv

    rows = aggregate(args.files)
    write_perf_csv(args.out, rows)
    print(f"perf\t{args.out}")


def _cmd_bench(args) -> None:
    from .harness import bench_runtimes, write_bench_csv

    methods = args.methods.split(",") if args.methods else WEIGHTING_METHODS
    res = bench_runtimes(args.datasets, methods, n_obs=args.n_obs, seed=args.seed)
    write_bench_csv(args.out, res)
    for note in res.notes:
        print(f"note\t{note}")
    print(f"bench\t{args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countiptw", description="Weighting methods for count exposures and their simulation study.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write per-replication and summary CSVs")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default=".")
    s.add_argument("--reps", type=int, default=None, help="override n_reps")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("calibrate", help="calibrate the scenario's missingness plan")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_calibrate)

    s = sub.add_parser("weights", help="estimate stabilised weights for a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, choices=[m.value for m in WEIGHTING_METHODS])
    s.add_argument("--winsorize", type=float, default=1.0)
    s.add_argument("--config", default=None, help="scenario file supplying [gbm]/[energy] settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_weights)

    s = sub.add_parser("diagnose", help="balance diagnostics for a weight vector")
    s.add_argument("--data", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--level", choices=("full", "basic"), default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_diagnose)

    s = sub.add_parser("aggregate", help="summarise per-replication CSVs")
    s.add_argument("files", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_aggregate)

    s = sub.add_parser("bench", help="pairwise runtime ratios of the weighting methods")
    s.add_argument("--datasets", type=int, default=20)
    s.add_argument("--methods", default=None, help="comma-separated subset")
    s.add_argument("--n-obs", type=int, default=5000)
    s.add_argument("--seed", type=int, default=20240101)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "weights" and not (0.0 < args.winsorize <= 1.0):
        print("error: ValueError: --winsorize must lie in (0, 1]", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line report at the boundary
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
