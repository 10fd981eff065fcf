"""Covariate balancing weights for a continuous-type exposure.

Parametric version: with ``X = [1, C*]`` and a normal working model
``A* | C* ~ N(X beta, sigma^2)``, the estimating equations are

    mean_i w_i A*_i X_i = 0                (balance, including sum w A* = 0)
    mean_i (A*_i - X_i beta)^2 / sigma^2 = 1
    mean_i (A*_i - mu) = 0,   mean_i (A*_i - mu)^2 = s^2

with ``w_i = phi(A*_i; mu, s^2) / phi(A*_i; X_i beta, sigma^2)``.  The system is
exactly identified, so every weighting matrix gives the same root; it is
solved by damped Newton on ``beta`` with ``sigma^2`` profiled out.
"""
from __future__ import annotations

import numpy as np

from ..data_model import Dataset, MethodId
from .base import WeightError, WeightVector, design_from, normal_pdf, standardize


def _balance(beta, a, X, mu, s2):
    r = a - X @ beta
    sigma2 = float(np.mean(r * r))
    logw = 0.5 * np.log(sigma2 / s2) - 0.5 * (a - mu) ** 2 / s2 + 0.5 * r * r / sigma2
    w = np.exp(logw)
    g = X.T @ (w * a) / len(a)
    return g, w, r, sigma2


def _jacobian(a, X, w, r, sigma2):
    n = len(a)
    dsig = -2.0 * (X.T @ r) / n  # d sigma^2 / d beta
    # d log w_i / d beta = -r_i x_i / sigma2 + (1/(2 sigma2) - r_i^2 / (2 sigma2^2)) dsig
    coef = 0.5 / sigma2 - 0.5 * r * r / sigma2**2
    dlogw = -(r / sigma2)[:, None] * X + coef[:, None] * dsig[None, :]
    return X.T @ ((w * a)[:, None] * dlogw) / n


def cbps_weights(ds: Dataset, tol: float = 1e-10, max_iter: int = 100) -> WeightVector:
    a, cmat = design_from(ds)
    design = standardize(a, cmat)
    astar = design.a_star
    n = len(a)
    X = np.column_stack([np.ones(n), design.c_star])
    mu = float(astar.mean())
    s2 = float(np.mean((astar - mu) ** 2))
    beta = np.linalg.lstsq(X, astar, rcond=None)[0]
    g, w, r, sigma2 = _balance(beta, astar, X, mu, s2)
    obj = float(g @ g)
    converged = False
    for it in range(max_iter):
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        J = _jacobian(astar, X, w, r, sigma2)
        try:
            step = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -g, rcond=None)[0]
        t = 1.0
        while t > 1e-12:
            cand = beta + t * step
            g_new, w_new, r_new, s_new = _balance(cand, astar, X, mu, s2)
            obj_new = float(g_new @ g_new)
            if np.isfinite(obj_new) and obj_new < obj * (1 - 1e-4 * t) + 1e-300:
                break
            t *= 0.5
        else:
            break
        beta, g, w, r, sigma2, obj = cand, g_new, w_new, r_new, s_new, obj_new
    if not converged:
        raise WeightError(f"cbps: balance equations not solved (max |g| = {np.max(np.abs(g)):.3g})")
    num = normal_pdf(astar, mu, s2)
    den = normal_pdf(astar, X @ beta, sigma2)
    return WeightVector(num / den, MethodId.CBPS, num, den,
                        info={"beta": beta, "sigma2": sigma2, "iterations": it, "design": design})
