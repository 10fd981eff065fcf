"""Multiple imputation by chained equations.

``c2``, ``c3`` and ``a`` are imputed by predictive mean matching (Bayesian
linear regression draw, type-1 matching, 5 donors); the binary outcome by a
logistic regression with coefficients drawn from their approximate posterior.
Each imputation is an independent chain started from random draws of the
observed values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import Dataset, DataError
from .glm import GlmError, _inv_sym, fit_glm
from .rng import RngStream

VISIT_ORDER = ("c2", "c3", "a", "y")
ALL_VARS = ("c1", "c2", "c3", "a", "y")
PMM_DONORS = 5


class ImputationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImputationSet:
    m: int
    completed: tuple[Dataset, ...]
    phi_realised: float
    cycles: int
    logistic_fallbacks: int = 0


def choose_m(ds_or_phi, m_cap: int = 100) -> int:
    """``max(2, round(100 phi_r))`` capped at ``m_cap``."""
    phi = ds_or_phi if isinstance(ds_or_phi, (int, float)) else float(ds_or_phi.incomplete_rows.mean())
    m = max(2, int(np.floor(100 * phi + 0.5)))
    return int(min(m, m_cap))


def _design(cols: list[np.ndarray]) -> np.ndarray:
    return np.column_stack([np.ones(cols[0].size)] + cols)


def pmm_impute_variable(target, observed, X, rng: RngStream, k: int = PMM_DONORS) -> np.ndarray:
    """Impute ``target[~observed]`` by predictive mean matching on design ``X``.

    ``X`` must include the intercept column and be complete.
    """
    target = np.asarray(target, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    X = np.asarray(X, dtype=float)
    n_obs, p = int(observed.sum()), X.shape[1]
    if n_obs < max(k, p + 1):
        raise ImputationError(f"pmm needs at least {max(k, p + 1)} observed values, found {n_obs}")
    out = target.copy()
    miss = ~observed
    if not miss.any():
        return out
    Xo, yo = X[observed], target[observed]
    xtx = Xo.T @ Xo
    try:
        xtx_inv = _inv_sym(xtx)
    except GlmError as exc:
        raise ImputationError(f"pmm: {exc}") from exc
    beta_hat = xtx_inv @ (Xo.T @ yo)
    resid = yo - Xo @ beta_hat
    df = n_obs - p
    sigma2 = float(resid @ resid) / rng.chisquare(df) if df > 0 else float(resid @ resid)
    L = np.linalg.cholesky(xtx_inv + 1e-14 * np.eye(p) * np.trace(xtx_inv))
    beta_draw = beta_hat + np.sqrt(sigma2) * (L @ rng.normal(p))
    yhat_obs = Xo @ beta_hat
    yhat_mis = X[miss] @ beta_draw
    order = np.argsort(yhat_obs, kind="stable")
    sorted_hat = yhat_obs[order]
    pos = np.searchsorted(sorted_hat, yhat_mis)
    # the k nearest lie in a window of 2k sorted positions around the insertion point
    offsets = np.arange(-k, k)
    cand = np.clip(pos[:, None] + offsets[None, :], 0, n_obs - 1)
    dist = np.abs(sorted_hat[cand] - yhat_mis[:, None])
    dist[:, 1:][cand[:, 1:] == cand[:, :-1]] = np.inf  # duplicate positions after clipping
    nearest = np.argpartition(dist, k - 1, axis=1)[:, :k]
    pick = nearest[np.arange(nearest.shape[0]), rng.integers(0, k, size=nearest.shape[0])]
    donors = order[cand[np.arange(cand.shape[0]), pick]]
    out[miss] = yo[donors]
    return out


def _augment_for_separation(X: np.ndarray, y: np.ndarray):
    """Pseudo-observations that keep a logistic fit finite under separation."""
    n, p = X.shape
    rows, ys = [], []
    mean = X[:, 1:].mean(axis=0)
    sd = X[:, 1:].std(axis=0)
    for j in range(p - 1):
        for sign in (-1.0, 1.0):
            for label in (0.0, 1.0):
                r = np.concatenate(([1.0], mean))
                r[j + 1] += sign * sd[j]
                rows.append(r)
                ys.append(label)
    Xa = np.vstack([X, np.array(rows)])
    ya = np.concatenate([y, ys])
    wa = np.concatenate([np.ones(n), np.full(len(ys), (p + 1) / len(ys))])
    return Xa, ya, wa


def logistic_impute_variable(target, observed, X, rng: RngStream) -> tuple[np.ndarray, bool]:
    """Impute a binary ``target``; returns the column and a fallback flag."""
    target = np.asarray(target, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    X = np.asarray(X, dtype=float)
    out = target.copy()
    miss = ~observed
    if not miss.any():
        return out, False
    yo, Xo = target[observed], X[observed]
    if yo.min() == yo.max():
        raise ImputationError("logistic imputation needs both classes among observed values")
    fallback = False
    try:
        fit = fit_glm(Xo, yo, "binomial_logit")
        if not fit.converged or np.max(np.abs(fit.coefficients)) > 25:
            raise GlmError("separation")
    except GlmError:
        fallback = True
        Xa, ya, wa = _augment_for_separation(Xo, yo)
        fit = fit_glm(Xa, ya, "binomial_logit", prior_weights=wa)
    p = X.shape[1]
    L = np.linalg.cholesky(fit.cov_model + 1e-14 * np.eye(p) * np.trace(fit.cov_model))
    beta = fit.coefficients + L @ rng.normal(p)
    prob = expit(X[miss] @ beta)
    out[miss] = (rng.uniform(prob.size) < prob).astype(float)
    return out, fallback


def _run_chain(ds: Dataset, cycles: int, rng: RngStream) -> tuple[Dataset, int]:
    cols = {v: np.array(ds.column(v), dtype=float) for v in ALL_VARS}
    obs = {v: ds.observed(v) for v in ALL_VARS}
    targets = [v for v in VISIT_ORDER if not obs[v].all()]
    init = rng.child(0)
    for v in targets:
        pool = cols[v][obs[v]]
        if pool.size == 0:
            raise ImputationError(f"{v} has no observed values")
        cols[v][~obs[v]] = pool[init.integers(0, pool.size, size=int((~obs[v]).sum()))]
    fallbacks = 0
    for cycle in range(cycles):
        step = rng.child(1 + cycle)
        for v in targets:
            X = _design([cols[u] for u in ALL_VARS if u != v])
            if v == "y":
                cols[v], fb = logistic_impute_variable(cols[v], obs[v], X, step)
                fallbacks += int(fb)
            else:
                cols[v] = pmm_impute_variable(cols[v], obs[v], X, step)
    completed = Dataset(c1=cols["c1"], c2=cols["c2"], c3=cols["c3"], a=cols["a"], y=cols["y"], a_max=ds.a_max)
    return completed, fallbacks


def mice_impute(ds: Dataset, m: int, cycles: int, rng: RngStream) -> ImputationSet:
    if ds.is_complete:
        raise ImputationError("nothing to impute: dataset has no missing cells")
    if m < 1 or cycles < 1:
        raise ValueError("m and cycles must be positive")
    completed, total_fb = [], 0
    for i in range(m):
        try:
            out, fb = _run_chain(ds, cycles, rng.child(i))
        except (ImputationError, GlmError, DataError, np.linalg.LinAlgError) as exc:
            raise ImputationError(f"imputation chain {i} failed: {exc}") from exc
        completed.append(out)
        total_fb += fb
    return ImputationSet(m, tuple(completed), float(ds.incomplete_rows.mean()), cycles, total_fb)
