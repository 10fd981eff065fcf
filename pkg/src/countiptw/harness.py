"""Scenario orchestration: replications, output files, aggregation, benchmarks."""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import (
    WEIGHTING_METHODS, Dataset, MethodId, ReplicationResult, ScenarioConfig, WeightDiagnostics,
)
from .dgm import generate_dataset
from .diagnostics import weight_diagnostics
from .estimation import analyse_complete, pool_rubin
from .imputation import choose_m, mice_impute
from .metrics import PerfRow, summarize
from .missingness import MissingnessPlan, ampute, plan_for_scenario
from .rng import RngStream, substream
from .weights import compute_weights, winsorise

REP_COLUMNS = (
    "scenario", "rep", "method", "winsorised", "theta_hat", "var_hat", "ci_lo", "ci_hi",
    "m_used", "ess", "mean_abs_rho", "d_w", "eps_a", "eps_c", "failed", "theta_true",
)

# child purposes of a replication's stream
_DATA, _AMPUTE, _IMPUTE = 0, 1, 2


class HarnessError(RuntimeError):
    pass


@dataclass
class ScenarioRun:
    config: ScenarioConfig
    plan: MissingnessPlan | None
    results: list[ReplicationResult]
    seconds: dict[tuple[int, str], float] = field(default_factory=dict)  # (rep, method) -> wall time
    perf: list[PerfRow] = field(default_factory=list)
    files: dict[str, Path] = field(default_factory=dict)

    def failures(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.results:
            if r.failed:
                out[str(r.method)] = out.get(str(r.method), 0) + 1
        return out


# ----------------------------------------------------------------------------
# One replication
# ----------------------------------------------------------------------------

def _variants(config: ScenarioConfig, method: MethodId) -> list[bool]:
    if method.is_weighting and config.winsorize_percentile < 1.0:
        return [False, True]
    return [False]


def _diagnose(ds: Dataset, wv, level: str) -> WeightDiagnostics | None:
    if wv is None or level == "none":
        return None
    return weight_diagnostics(ds.a, ds.covariates, wv.w, level=level)


def _mean_diagnostics(diags: list[WeightDiagnostics]) -> WeightDiagnostics | None:
    """Average diagnostics over imputations (field by field)."""
    if not diags:
        return None
    rho = np.mean([d.rho_w for d in diags], axis=0)

    def avg(name):
        vals = np.array([getattr(d, name) for d in diags], dtype=float)
        return float(vals.mean()) if np.all(np.isfinite(vals)) else math.nan

    return WeightDiagnostics(
        ess=avg("ess"), rho_w=tuple(float(r) for r in rho), mean_abs_rho=avg("mean_abs_rho"),
        d_w=avg("d_w"), eps_a=avg("eps_a"), eps_c=avg("eps_c"),
        dcov_w=avg("dcov_w"), eps_c_joint=avg("eps_c_joint"),
    )


def _complete_method(config, ds, method, rep):
    out = []
    raw = compute_weights(ds, method, config.gbm, config.energy) if method.is_weighting else None
    for wins in _variants(config, method):
        try:
            wv = winsorise(raw, config.winsorize_percentile) if wins else raw
            est, wv = analyse_complete(ds, method, 1.0, weights=wv)
            out.append(ReplicationResult(
                rep, method, wins, est.theta, est.var, est.ci_lo, est.ci_hi,
                _diagnose(ds, wv, config.diagnostics), 1,
            ))
        except Exception as exc:  # noqa: BLE001 - recorded per method
            out.append(ReplicationResult.failure(rep, method, wins, _describe(exc)))
    return out


def _mi_method(config, ims, method, rep):
    variants = _variants(config, method)
    ests = {v: [] for v in variants}
    diags = {v: [] for v in variants}
    failed: dict[bool, str] = {}
    for j, ds in enumerate(ims.completed):
        try:
            raw = compute_weights(ds, method, config.gbm, config.energy) if method.is_weighting else None
        except Exception as exc:  # noqa: BLE001
            return [ReplicationResult.failure(rep, method, v, f"imputation {j}: {_describe(exc)}") for v in variants]
        for v in variants:
            if v in failed:
                continue
            try:
                wv = winsorise(raw, config.winsorize_percentile) if v else raw
                est, wv = analyse_complete(ds, method, 1.0, weights=wv)
                ests[v].append((est.theta, est.var))
                d = _diagnose(ds, wv, config.diagnostics)
                if d is not None:
                    diags[v].append(d)
            except Exception as exc:  # noqa: BLE001
                failed[v] = f"imputation {j}: {_describe(exc)}"
    out = []
    for v in variants:
        if v in failed:
            out.append(ReplicationResult.failure(rep, method, v, failed[v]))
            continue
        try:
            pooled = pool_rubin(ests[v], config.mi_quantile)
        except Exception as exc:  # noqa: BLE001
            out.append(ReplicationResult.failure(rep, method, v, _describe(exc)))
            continue
        out.append(ReplicationResult(
            rep, method, v, pooled.theta, pooled.T, pooled.ci_lo, pooled.ci_hi,
            _mean_diagnostics(diags[v]), ims.m,
        ))
    return out


def _describe(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def replication_data(config: ScenarioConfig, plan: MissingnessPlan | None, rep_index: int) -> Dataset:
    """The (possibly amputed) dataset analysed in replication ``rep_index``."""
    rng = substream(config.seed, rep_index)
    ds = generate_dataset(config, rng.child(_DATA))
    if plan is not None:
        ds = ampute(ds, plan, rng.child(_AMPUTE))
    return ds


def _run_replication_timed(config, plan, rep_index):
    if (plan is None) != (config.missingness == "none"):
        raise HarnessError("missingness plan does not match the scenario configuration")
    rep = int(rep_index)
    ds = replication_data(config, plan, rep)
    results: list[ReplicationResult] = []
    seconds: dict[tuple[int, str], float] = {}
    ims = None
    if not ds.is_complete:
        try:
            t0 = time.perf_counter()
            m = choose_m(ds, config.m_cap)
            ims = mice_impute(ds, m, config.mice_cycles, substream(config.seed, rep).child(_IMPUTE))
            seconds[(rep, "imputation")] = time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001 - every method fails with the imputation
            for method in config.methods:
                for v in _variants(config, method):
                    results.append(ReplicationResult.failure(rep, method, v, _describe(exc)))
            return results, seconds
    for method in config.methods:
        t0 = time.perf_counter()
        if ims is None:
            try:
                results.extend(_complete_method(config, ds, method, rep))
            except Exception as exc:  # noqa: BLE001 - weight estimation failed
                results.extend(ReplicationResult.failure(rep, method, v, _describe(exc))
                               for v in _variants(config, method))
        else:
            results.extend(_mi_method(config, ims, method, rep))
        seconds[(rep, str(method))] = time.perf_counter() - t0
    return results, seconds


def run_replication(config: ScenarioConfig, plan: MissingnessPlan | None, rep_index: int) -> list[ReplicationResult]:
    """All method results for one replication; a pure function of ``(config, plan, rep_index)``."""
    return _run_replication_timed(config, plan, rep_index)[0]


# ----------------------------------------------------------------------------
# Scenario runs and files
# ----------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def result_row(scenario: str, theta_true: float, r: ReplicationResult) -> dict:
    d = r.diagnostics
    nan = math.nan
    return {
        "scenario": scenario, "rep": r.rep_index, "method": str(r.method), "winsorised": r.winsorised,
        "theta_hat": r.theta_hat, "var_hat": r.var_hat, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
        "m_used": r.m_used,
        "ess": d.ess if d else nan, "mean_abs_rho": d.mean_abs_rho if d else nan,
        "d_w": d.d_w if d else nan, "eps_a": d.eps_a if d else nan, "eps_c": d.eps_c if d else nan,
        "failed": r.failed, "theta_true": theta_true,
    }


def write_results_csv(path, scenario: str, theta_true: float, results) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REP_COLUMNS)
        for r in results:
            row = result_row(scenario, theta_true, r)
            w.writerow([row[c] if c in ("scenario", "method") else _fmt(row[c]) for c in REP_COLUMNS])


def _perf_value(v) -> str:
    if isinstance(v, str):
        return v
    return _fmt(v)


def write_perf_csv(path, rows: list[PerfRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PerfRow.columns())
        for row in rows:
            w.writerow([_perf_value(v) for v in row.as_dict().values()])


def _method_order(method: str) -> int:
    order = [m.value for m in MethodId]
    return order.index(method) if method in order else len(order)


def perf_rows(scenario: str, theta_true: float, results) -> list[PerfRow]:
    """PerfRows in canonical order: method enum order, raw before winsorised."""
    groups: dict[tuple[str, bool], list[ReplicationResult]] = {}
    for r in sorted(results, key=lambda r: r.rep_index):
        groups.setdefault((str(r.method), bool(r.winsorised)), []).append(r)
    keys = sorted(groups, key=lambda k: (_method_order(k[0]), k[1]))
    rows = []
    for method, wins in keys:
        rs = groups[(method, wins)]
        if all(r.failed for r in rs):
            nan = math.nan
            rows.append(PerfRow(scenario, method, wins, 0, len(rs), theta_true,
                                nan, nan, nan, nan, nan, nan, nan, nan, nan))
            continue
        rows.append(summarize(rs, theta_true, scenario, method, wins))
    return rows


def _worker(args):
    config, plan, rep = args
    return _run_replication_timed(config, plan, rep)


def run_scenario(config: ScenarioConfig, workers: int = 1, out_dir=None,
                 plan: MissingnessPlan | None = None, reps=None) -> ScenarioRun:
    """Run all replications (or the subset ``reps``) and optionally write output files.

    Files written to ``out_dir``: ``<scenario>_reps.csv`` (one row per
    replication, method and variant), ``<scenario>_perf.csv``,
    ``<scenario>_meta.toml`` and, when missingness is simulated,
    ``<scenario>_plan.toml``.
    """
    from .missingness import plan_to_toml

    if plan is None and config.missingness != "none":
        plan = plan_for_scenario(config)  # CalibrationError aborts the scenario
    reps = list(range(config.n_reps)) if reps is None else [int(r) for r in reps]
    tasks = [(config, plan, r) for r in reps]
    if workers <= 1:
        outputs = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_worker, tasks, chunksize=1))
    results: list[ReplicationResult] = []
    seconds: dict = {}
    for res, sec in outputs:
        results.extend(res)
        seconds.update(sec)
    results.sort(key=lambda r: (r.rep_index, _method_order(str(r.method)), r.winsorised))
    run = ScenarioRun(config, plan, results, seconds)
    run.perf = perf_rows(config.scenario_id, config.theta_true, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sid = config.scenario_id
        run.files["reps"] = out / f"{sid}_reps.csv"
        run.files["perf"] = out / f"{sid}_perf.csv"
        write_results_csv(run.files["reps"], sid, config.theta_true, results)
        write_perf_csv(run.files["perf"], run.perf)
        run.files["meta"] = out / f"{sid}_meta.toml"
        run.files["meta"].write_text(run_metadata(config, run), encoding="utf-8")
        if plan is not None:
            run.files["plan"] = out / f"{sid}_plan.toml"
            run.files["plan"].write_text(plan_to_toml(plan), encoding="utf-8")
    return run


def run_metadata(config: ScenarioConfig, run: ScenarioRun) -> str:
    """Conventions behind the numbers in the output files, as TOML."""
    from . import __version__
    from .data_model import dump_scenario_config

    failures = run.failures()
    lines = [
        dump_scenario_config(config).strip(),
        "",
        "[run]",
        f'package_version = "{__version__}"',
        f"theta_true = {config.theta_true!r}",
        'complete_data_ci = "normal"',
        f'mi_ci = "{config.mi_quantile}"',
        'rubin_df = "classical"',
        'model_se = "sqrt(mean(var_hat))"',
        'sandwich = "HC0"',
        f"replications = {len({r.rep_index for r in run.results})}",
        "",
        "[run.failures]",
        *(f"{m} = {failures[m]}" for m in sorted(failures)),
    ]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Aggregation of per-replication files
# ----------------------------------------------------------------------------

def _parse_float(s: str) -> float:
    return math.nan if s == "" else float(s)


def _parse_bool(s: str) -> bool:
    if s in ("1", "true", "True"):
        return True
    if s in ("0", "false", "False"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_results_csv(path) -> list[tuple[str, float, ReplicationResult]]:
    """Rows of a per-replication file as ``(scenario, theta_true, result)``."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != REP_COLUMNS:
            raise HarnessError(f"{path}:1: header does not match the per-replication schema")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(REP_COLUMNS):
                    raise ValueError(f"expected {len(REP_COLUMNS)} fields, found {len(row)}")
                rec = dict(zip(REP_COLUMNS, row))
                failed = _parse_bool(rec["failed"])
                method = MethodId(rec["method"])
                ess = _parse_float(rec["ess"])
                diag = None
                if not math.isnan(ess):
                    diag = WeightDiagnostics(
                        ess=ess, rho_w=(), mean_abs_rho=_parse_float(rec["mean_abs_rho"]),
                        d_w=_parse_float(rec["d_w"]), eps_a=_parse_float(rec["eps_a"]),
                        eps_c=_parse_float(rec["eps_c"]),
                    )
                result = ReplicationResult(
                    int(rec["rep"]), method, _parse_bool(rec["winsorised"]),
                    _parse_float(rec["theta_hat"]), _parse_float(rec["var_hat"]),
                    _parse_float(rec["ci_lo"]), _parse_float(rec["ci_hi"]),
                    diag, int(rec["m_used"]), failed,
                )
                theta_true = float(rec["theta_true"])
            except (ValueError, KeyError) as exc:
                raise HarnessError(f"{path}:{lineno}: malformed row: {exc}") from None
            out.append((rec["scenario"], theta_true, result))
    return out


def aggregate(paths) -> list[PerfRow]:
    """Concatenate per-replication files and summarise per (scenario, method, variant)."""
    by_scenario: dict[str, list[ReplicationResult]] = {}
    truth: dict[str, tuple[float, Path]] = {}
    for p in paths:
        for scenario, theta_true, r in read_results_csv(p):
            if scenario in truth and truth[scenario][0] != theta_true:
                raise HarnessError(
                    f"theta_true mismatch for scenario {scenario}: "
                    f"{truth[scenario][0]!r} ({truth[scenario][1]}) vs {theta_true!r} ({p})")
            truth.setdefault(scenario, (theta_true, Path(p)))
            by_scenario.setdefault(scenario, []).append(r)
    rows = []
    for scenario in sorted(by_scenario):
        rows.extend(perf_rows(scenario, truth[scenario][0], by_scenario[scenario]))
    return rows


# ----------------------------------------------------------------------------
# Runtime benchmark
# ----------------------------------------------------------------------------

@dataclass
class BenchResult:
    methods: tuple[MethodId, ...]
    ratio: np.ndarray          # ratio[i, j] = geometric mean of t_i / t_j
    n_pairs: np.ndarray        # datasets contributing to each pair
    cpu_seconds: dict[str, list[float]]  # per method, NaN where the method failed
    notes: list[str]


def bench_runtimes(n_datasets: int = 20, methods=WEIGHTING_METHODS, n_obs: int = 5000,
                   seed: int = 20240101, config: ScenarioConfig | None = None) -> BenchResult:
    """Geometric-mean pairwise CPU-time ratios of weight estimators on negbin data."""
    methods = tuple(MethodId(m) for m in methods)
    if not methods or any(not m.is_weighting for m in methods):
        raise HarnessError("bench methods must be weighting methods")
    if config is None:
        config = ScenarioConfig("negbin", 1.1, methods, n_obs=n_obs, seed=seed)
    elif config.exposure_dgm != "negbin":
        raise HarnessError("benchmarks use the negbin exposure DGM")
    times = {str(m): [] for m in methods}
    notes = []
    for d in range(n_datasets):
        rng = RngStream(config.seed, d, (7,))
        ds = generate_dataset(config, rng.child(0))
        for m in methods:  # warm-up pass
            try:
                compute_weights(ds, m, config.gbm, config.energy)
            except Exception:  # noqa: BLE001 - reported on the timed pass
                pass
        order = list(methods)
        rng.child(1).generator.shuffle(order)
        for m in order:
            t0 = time.process_time()
            try:
                compute_weights(ds, m, config.gbm, config.energy)
                t = time.process_time() - t0
            except Exception as exc:  # noqa: BLE001
                t = math.nan
                notes.append(f"dataset {d}: {m} failed ({_describe(exc)}); excluded from its pairs")
            times[str(m)].append(max(t, 1e-9) if math.isfinite(t) else t)
    k = len(methods)
    ratio = np.ones((k, k))
    n_pairs = np.zeros((k, k), dtype=int)
    logt = {m: np.log(np.asarray(v)) for m, v in times.items()}
    for i, mi in enumerate(methods):
        for j, mj in enumerate(methods):
            diff = logt[str(mi)] - logt[str(mj)]
            ok = np.isfinite(diff)
            n_pairs[i, j] = int(ok.sum())
            ratio[i, j] = math.exp(diff[ok].mean()) if ok.any() else math.nan
    return BenchResult(methods, ratio, n_pairs, times, notes)


def write_bench_csv(path, bench: BenchResult) -> None:
    names = [str(m) for m in bench.methods]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + names + ["mean_cpu_seconds", "n_datasets"])
        for i, m in enumerate(names):
            t = np.asarray(bench.cpu_seconds[m], dtype=float)
            ok = np.isfinite(t)
            w.writerow([m] + [_fmt(x) for x in bench.ratio[i]]
                       + [_fmt(t[ok].mean() if ok.any() else math.nan), int(ok.sum())])
