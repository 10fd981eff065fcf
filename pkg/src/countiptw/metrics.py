"""Monte Carlo performance summaries (bias, empirical and model SE, coverage)."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .data_model import ReplicationResult


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PerfRow:
    scenario: str
    method: str
    winsorised: bool
    n_reps_used: int
    n_failed: int
    theta_true: float
    mean_theta: float
    bias: float
    bias_mcse: float
    rel_bias_pct: float  # NaN when theta_true == 0
    rel_bias_mcse: float
    empirical_se: float
    model_se: float
    coverage: float
    coverage_mcse: float
    ess_mean: float = math.nan
    ess_sd: float = math.nan
    ess_p05: float = math.nan
    ess_p95: float = math.nan
    mean_abs_rho: float = math.nan
    mean_m: float = 1.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.columns()}


def summarize(results, theta_true: float, scenario: str = "", method: str = "",
              winsorised: bool = False) -> PerfRow:
    """Performance of one method in one scenario.

    ``model_se`` is ``sqrt(mean(var_hat))``; failed replications are counted
    in ``n_failed`` and excluded from everything else.
    """
    results = list(results)
    ok = [r for r in results if not r.failed]
    failed = len(results) - len(ok)
    if not ok:
        raise MetricsError(f"no successful replications for {scenario}/{method}")
    th = np.array([r.theta_hat for r in ok])
    var = np.array([r.var_hat for r in ok])
    covered = np.array([r.ci_lo <= theta_true <= r.ci_hi for r in ok], dtype=float)
    R = th.size
    emp = float(th.std(ddof=1)) if R > 1 else math.nan
    bias = float(th.mean() - theta_true)
    bias_mcse = emp / math.sqrt(R) if R > 1 else math.nan
    if theta_true != 0:
        rel, rel_mcse = 100 * bias / theta_true, 100 * bias_mcse / abs(theta_true)
    else:
        rel, rel_mcse = math.nan, math.nan
    cov = float(covered.mean())
    ess_vals = np.array([r.diagnostics.ess for r in ok if r.diagnostics is not None])
    rho_vals = np.array([r.diagnostics.mean_abs_rho for r in ok if r.diagnostics is not None])
    ess_kw = {}
    if ess_vals.size:
        ess_kw = dict(
            ess_mean=float(ess_vals.mean()),
            ess_sd=float(ess_vals.std(ddof=1)) if ess_vals.size > 1 else 0.0,
            ess_p05=float(np.quantile(ess_vals, 0.05)),
            ess_p95=float(np.quantile(ess_vals, 0.95)),
            mean_abs_rho=float(rho_vals.mean()),
        )
    return PerfRow(
        scenario=scenario, method=str(method), winsorised=bool(winsorised),
        n_reps_used=R, n_failed=failed, theta_true=theta_true,
        mean_theta=float(th.mean()), bias=bias, bias_mcse=bias_mcse,
        rel_bias_pct=rel, rel_bias_mcse=rel_mcse,
        empirical_se=emp, model_se=float(math.sqrt(var.mean())),
        coverage=cov, coverage_mcse=math.sqrt(cov * (1 - cov) / R),
        mean_m=float(np.mean([r.m_used for r in ok])),
        **ess_kw,
    )


def group_results(results) -> dict:
    """Group replication results by ``(method, winsorised)``."""
    groups: dict = {}
    for r in results:
        groups.setdefault((str(r.method), bool(r.winsorised)), []).append(r)
    return groups


def summarize_all(results: list[ReplicationResult], theta_true: float, scenario: str) -> list[PerfRow]:
    return [summarize(rs, theta_true, scenario, m, w) for (m, w), rs in group_results(results).items()]
