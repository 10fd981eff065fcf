"""Empirical-likelihood balancing weights.

Maximise ``sum log w_i`` subject to ``sum w_i g_i = 0`` and ``sum w_i = n``
with ``g_i = (A*_i C*_i, C*_i, A*_i)``.  The solution is ``w_i = 1 / (1 +
lambda' g_i)`` where ``lambda`` minimises the convex dual
``-sum log*(1 + lambda' g_i)``; ``log*`` is the log extended quadratically
below ``1/n`` so Newton steps stay defined outside the feasible set.
"""
from __future__ import annotations

import numpy as np

from ..data_model import Dataset, MethodId
from .base import WeightError, WeightVector, design_from, standardize


def _pseudo_log(z: np.ndarray, eps: float):
    """``log*`` and its first two derivatives."""
    low = z < eps
    zz = np.where(low, eps, z)
    f = np.where(low, np.log(eps) - 1.5 + 2 * z / eps - 0.5 * (z / eps) ** 2, np.log(zz))
    d1 = np.where(low, 2 / eps - z / eps**2, 1 / zz)
    d2 = np.where(low, -1 / eps**2, -1 / zz**2)
    return f, d1, d2


def el_weights(g: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> tuple[np.ndarray, np.ndarray, int]:
    """Solve the empirical-likelihood dual for moment matrix ``g`` (n x q)."""
    n, q = g.shape
    eps = 1.0 / n
    lam = np.zeros(q)

    def dual(l):
        f, d1, d2 = _pseudo_log(1 + g @ l, eps)
        return -float(f.sum()), -(g.T @ d1), (g.T * (-d2)) @ g

    val, grad, hess = dual(lam)
    for it in range(1, max_iter + 1):
        z = 1 + g @ lam
        w = 1 / z if np.all(z > eps) else None
        if w is not None and np.max(np.abs(g.T @ w)) / n < tol:
            if abs(w.mean() - 1.0) < 1e-6:
                return w, lam, it
            # weights collapsing towards zero: the dual is unbounded
            raise WeightError("npcbps: likelihood dual is unbounded; no positive-weight solution")
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        t = 1.0
        while t > 1e-14:
            cand = lam + t * step
            v_new, g_new, h_new = dual(cand)
            if np.isfinite(v_new) and v_new <= val + 1e-4 * t * float(grad @ step):
                break
            t *= 0.5
        else:
            raise WeightError("npcbps: line search failed in the likelihood dual")
        lam, val, grad, hess = cand, v_new, g_new, h_new
    raise WeightError("npcbps: dual Newton did not converge; balance constraints may be infeasible")


def moment_matrix(a, cmat) -> np.ndarray:
    design = standardize(a, cmat)
    return np.column_stack([design.a_star[:, None] * design.c_star, design.c_star, design.a_star])


def npcbps_weights(ds: Dataset, tol: float = 1e-8) -> WeightVector:
    a, cmat = design_from(ds)
    g = moment_matrix(a, cmat)
    w, lam, it = el_weights(g, tol)
    if np.any(1 + g @ lam <= 1.0 / len(a)):
        raise WeightError("npcbps: no positive-weight solution")
    return WeightVector(w, MethodId.NPCBPS, info={"lambda": lam, "iterations": it})
