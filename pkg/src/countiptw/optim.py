"""Derivative-free minimisation under linear inequality constraints.

:func:`nelder_mead` is Nash's compact Nelder-Mead (reflection 1, contraction
0.5, expansion 2, simplex built from 10% coordinate steps).  :func:`constr_optim`
wraps it in an adaptive logarithmic barrier for constraints ``ui @ x - ci >= 0``:
each outer iteration minimises

    f(x) - mu * sum(g_old * log(g(x)) - ui @ x),   g(x) = ui @ x - ci,

restarting from the previous solution until the barrier value stabilises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

_BIG = 1.0e35


@dataclass(frozen=True)
class OptimResult:
    x: np.ndarray
    fun: float
    n_evals: int
    converged: bool
    message: str = ""
    outer_iterations: int = 0


def nelder_mead(
    fn: Callable[[np.ndarray], float],
    x0,
    maxit: int = 500,
    reltol: float = math.sqrt(np.finfo(float).eps),
    abstol: float = -math.inf,
    alpha: float = 1.0,
    beta: float = 0.5,
    gamma: float = 2.0,
) -> OptimResult:
    x0 = np.asarray(x0, dtype=float).copy()
    n = x0.size
    f0 = fn(x0)
    if not math.isfinite(f0):
        raise ValueError("function cannot be evaluated at initial parameters")
    funcount = 1
    convtol = reltol * (abs(f0) + reltol)
    n1 = n + 1
    # columns 0..n are vertices, column n1 is the centroid workspace
    P = np.zeros((n + 1, n + 2))
    P[n, 0] = f0
    P[:n, 0] = x0
    L = 0
    step = max(0.1 * np.max(np.abs(x0)), 0.0)
    if step == 0.0:
        step = 0.1
    size = 0.0
    for j in range(1, n1):
        P[:n, j] = x0
        trystep = step
        while P[j - 1, j] == x0[j - 1]:
            P[j - 1, j] = x0[j - 1] + trystep
            trystep *= 10
        size += trystep
    oldsize = size
    calcvert = True
    fail = False

    def evaluate(x):
        v = fn(x)
        return v if math.isfinite(v) else _BIG

    while True:
        if calcvert:
            for j in range(n1):
                if j != L:
                    P[n, j] = evaluate(P[:n, j])
                    funcount += 1
            calcvert = False
        VL = P[n, L]
        VH = VL
        H = L
        for j in range(n1):
            if j != L:
                f = P[n, j]
                if f < VL:
                    L, VL = j, f
                if f > VH:
                    H, VH = j, f
        if VH <= VL + convtol or VL <= abstol:
            break
        centroid = (P[:n, :n1].sum(axis=1) - P[:n, H]) / n
        P[:n, n1] = centroid
        xr = (1 + alpha) * centroid - alpha * P[:n, H]
        VR = evaluate(xr)
        funcount += 1
        if VR < VL:
            P[n, n1] = VR
            xe = gamma * xr + (1 - gamma) * centroid
            P[:n, n1] = xr
            fe = evaluate(xe)
            funcount += 1
            if fe < VR:
                P[:n, H] = xe
                P[n, H] = fe
            else:
                P[:n, H] = xr
                P[n, H] = VR
        else:
            if VR < VH:
                P[:n, H] = xr
                P[n, H] = VR
            xc = (1 - beta) * P[:n, H] + beta * P[:n, n1]
            fc = evaluate(xc)
            funcount += 1
            if fc < P[n, H]:
                P[:n, H] = xc
                P[n, H] = fc
            elif VR >= VH:
                calcvert = True
                size = 0.0
                for j in range(n1):
                    if j != L:
                        P[:n, j] = beta * (P[:n, j] - P[:n, L]) + P[:n, L]
                        size += float(np.sum(np.abs(P[:n, j] - P[:n, L])))
                if size < oldsize:
                    oldsize = size
                else:
                    fail = True
                    break
        if funcount > maxit:
            break
    converged = not fail and funcount <= maxit
    return OptimResult(P[:n, L].copy(), float(P[n, L]), funcount, converged)


def constr_optim(
    f: Callable[[np.ndarray], float],
    theta0,
    ui,
    ci,
    mu: float = 1e-4,
    maxit: int = 500,
    outer_iterations: int = 100,
    outer_eps: float = 1e-5,
) -> OptimResult:
    """Minimise ``f`` subject to ``ui @ x - ci >= 0`` (adaptive barrier)."""
    ui = np.atleast_2d(np.asarray(ui, dtype=float))
    ci = np.asarray(ci, dtype=float)
    theta = np.asarray(theta0, dtype=float).copy()
    if np.any(ui @ theta - ci <= 0):
        raise ValueError("initial value is not in the interior of the feasible region")

    def barrier(x, x_old):
        ux = ui @ x
        g = ux - ci
        if np.any(g < 0):
            return math.nan
        g_old = ui @ x_old - ci
        with np.errstate(divide="ignore"):
            bar = float(np.sum(g_old * np.log(g) - ux))
        if not math.isfinite(bar):
            bar = -math.inf
        return f(x) - mu * bar

    obj = f(theta)
    r = barrier(theta, theta)
    total = 0
    inner = None
    converged = False
    i = 0
    for i in range(1, outer_iterations + 1):
        obj_old, r_old, theta_old = obj, r, theta.copy()
        inner = nelder_mead(lambda x: barrier(x, theta_old), theta_old, maxit=maxit)
        r = inner.fun
        total += inner.n_evals
        if math.isfinite(r) and math.isfinite(r_old) and abs(r - r_old) < (0.001 + abs(r)) * outer_eps:
            converged = True
            break
        theta = inner.x
        obj = f(theta)
        if obj > obj_old:
            converged = True
            break
    assert inner is not None
    msg = "" if converged else "barrier algorithm ran out of iterations"
    return OptimResult(inner.x, f(inner.x), total, converged and inner.converged, msg, i)
