"""Effect estimation (ln RR per unit exposure) and Rubin's-rules pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data_model import Dataset, MethodId
from .glm import fit_glm
from .weights import WeightVector, compute_weights, winsorise

Z975 = float(stats.norm.ppf(0.975))


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EffectEstimate:
    theta: float
    intercept: float
    se: float
    ci_lo: float
    ci_hi: float
    method: MethodId

    @property
    def var(self) -> float:
        return self.se**2


@dataclass(frozen=True)
class PooledEstimate:
    theta: float
    W_bar: float
    B: float
    T: float
    nu: float  # inf when B == 0
    m: int
    ci_lo: float
    ci_hi: float
    quantile: str = "t"

    @property
    def se(self) -> float:
        return math.sqrt(self.T)


def estimate_effect(ds: Dataset, method: MethodId | str, weights: WeightVector | None = None) -> EffectEstimate:
    """Modified Poisson regression of ``y`` on ``a`` with HC0 sandwich SE."""
    method = MethodId(method)
    if not ds.is_complete:
        raise EstimationError("effect estimation needs a complete dataset")
    n = ds.n
    if not np.any(ds.y > 0):
        raise EstimationError(f"{method}: outcome has no events")
    if method is MethodId.ADJUSTED:
        X = np.column_stack([np.ones(n), ds.a, ds.c1, ds.c2, ds.c3])
    else:
        X = np.column_stack([np.ones(n), ds.a])
    if method.is_weighting:
        if weights is None:
            raise EstimationError(f"{method} needs a weight vector")
        w = weights.w
    else:
        w = None
    fit = fit_glm(X, ds.y, "poisson_log", prior_weights=w, want_sandwich=True)
    if not fit.converged:
        raise EstimationError(f"{method}: outcome model did not converge")
    theta = float(fit.coefficients[1])
    se = float(fit.se_sandwich[1])
    if not (math.isfinite(theta) and se > 0):
        raise EstimationError(f"{method}: degenerate estimate")
    return EffectEstimate(theta, float(fit.coefficients[0]), se, theta - Z975 * se, theta + Z975 * se, method)


def pool_rubin(estimates, quantile: str = "t") -> PooledEstimate:
    """Rubin's rules with the classical large-sample degrees of freedom."""
    est = np.asarray([(float(t), float(v)) for t, v in estimates], dtype=float)
    m = est.shape[0]
    if m < 2:
        raise EstimationError("pooling needs at least two imputations")
    if np.any(~(est[:, 1] > 0)):
        raise EstimationError("all within-imputation variances must be positive")
    theta = float(est[:, 0].mean())
    W = float(est[:, 1].mean())
    B = float(est[:, 0].var(ddof=1))
    T = W + (1 + 1 / m) * B
    try:
        nu = (m - 1) * (1 + W / ((1 + 1 / m) * B)) ** 2 if B > 0 else math.inf
    except OverflowError:  # B negligible next to W
        nu = math.inf
    if quantile == "t" and math.isfinite(nu):
        q = float(stats.t.ppf(0.975, nu))
    else:
        q = Z975
    half = q * math.sqrt(T)
    return PooledEstimate(theta, W, B, T, nu, m, theta - half, theta + half, quantile)


def analyse_complete(ds: Dataset, method: MethodId | str, winsorize_percentile: float = 1.0,
                     gbm=None, energy=None, weights: WeightVector | None = None):
    """Weights (if any) then effect for one complete dataset; returns ``(estimate, weights)``."""
    method = MethodId(method)
    wv = None
    if method.is_weighting:
        wv = weights if weights is not None else compute_weights(ds, method, gbm, energy)
        if winsorize_percentile < 1.0:
            wv = winsorise(wv, winsorize_percentile)
    return estimate_effect(ds, method, wv), wv


def run_mi_analysis(ims, method: MethodId | str, winsorize_percentile: float = 1.0,
                    quantile: str = "t", gbm=None, energy=None) -> PooledEstimate:
    """Within-imputation analysis: weights and effect per completed dataset, then pooling."""
    method = MethodId(method)
    if not method.is_weighting:
        winsorize_percentile = 1.0
    ests = []
    for j, ds in enumerate(ims.completed):
        try:
            est, _ = analyse_complete(ds, method, winsorize_percentile, gbm, energy)
        except Exception as exc:
            raise EstimationError(f"imputation {j}: {exc}") from exc
        ests.append((est.theta, est.var))
    return pool_rubin(ests, quantile)
