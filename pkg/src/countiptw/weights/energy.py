"""Independence (distance-covariance optimal) weights.

Minimise ``D(w) = V^2_w(C, A) + E(F_C,w, F_C) + E(F_A,w, F_A)`` over
``{w >= 0, sum w = n}``.  Two solvers share the objective:

* ``lbfgsb`` (default): bound-constrained L-BFGS on ``v >= 0`` with
  ``w = n v / sum(v)``; the map is scale invariant so the simplex constraint
  holds exactly and the box is handled natively.
* ``spg``: spectral projected gradient with Barzilai-Borwein steps, exact
  Euclidean projection onto the scaled simplex and a monotone Armijo
  backtrack.  Slower, kept as an independent route for cross-checks.

Both start from uniform weights and return ``D(w) <= D(1)``.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from ..data_model import Dataset, EnergySettings, MethodId
from ..diagnostics import PairwiseSystem, standardize_columns
from .base import WeightError, WeightVector, design_from


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum x = total}``."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _spg(system: PairwiseSystem, u: np.ndarray, tol: float, max_iter: int):
    f, _, g = system.evaluate(u)
    step = 1.0 / max(np.max(np.abs(g)), 1e-12)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = project_simplex(u - step * g) - u
        gd = float(g @ d)
        if gd >= 0:
            converged = True  # stationary: projected gradient vanishes
            break
        t = 1.0
        while True:
            u_new = u + t * d
            f_new, _, g_new = system.evaluate(u_new)
            if f_new <= f + 1e-4 * t * gd or t < 1e-12:
                break
            t *= 0.5
        if f_new > f:
            if t < 1e-12:
                converged = True
                break
            raise WeightError("energy: objective increased across an accepted step")
        sk, yk = u_new - u, g_new - g
        sy = float(sk @ yk)
        step = min(1e10, max(1e-10, float(sk @ sk) / sy)) if sy > 0 else 1e10
        rel = (f - f_new) / max(abs(f), 1e-300)
        u, f, g = u_new, f_new, g_new
        if rel < tol:
            converged = True
            break
    return u, it, converged


def _lbfgsb(system: PairwiseSystem, u0: np.ndarray, tol: float, max_iter: int, f_scale: float):
    n = u0.size

    def fg(v):
        s = v.sum()
        if not s > 0:
            return np.inf, np.zeros_like(v)
        u = v / s
        f, _, g = system.evaluate(u)
        return f / f_scale, (g - float(g @ u)) / (s * f_scale)

    res = minimize(fg, u0 * n, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * n,
                   options={"maxiter": max_iter, "maxfun": 4 * max_iter, "ftol": tol, "gtol": 1e-12,
                            "maxcor": 10})
    v = np.maximum(res.x, 0.0)
    return v / v.sum(), int(res.nit), bool(res.success)


def energy_weights(ds: Dataset, settings: EnergySettings | None = None) -> WeightVector:
    s = settings or EnergySettings()
    a, cmat = design_from(ds)
    n = a.size
    system = PairwiseSystem(a, standardize_columns(cmat))
    u0 = np.full(n, 1.0 / n)
    f_uniform = system.evaluate(u0, want_grad=False)[0]
    if s.algorithm == "spg":
        u, it, converged = _spg(system, u0, s.tol, s.max_iter)
    else:
        u, it, converged = _lbfgsb(system, u0, s.tol, s.max_iter, max(abs(f_uniform), 1e-300))
    f_final, parts, _ = system.evaluate(u, want_grad=False)
    if f_final > f_uniform:
        raise WeightError("energy: optimiser finished above the uniform-weight objective")
    return WeightVector(u * n, MethodId.ENERGY, info={
        "objective": f_final, "objective_uniform": f_uniform, "components": parts,
        "iterations": it, "converged": converged, "algorithm": s.algorithm,
    })
