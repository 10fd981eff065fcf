"""Weight-quality metrics: ESS, weighted correlations, energy statistics.

All weighted quantities normalise ``w`` to mean 1 first.  Distance
statistics use Euclidean distance on column-standardised covariates and
absolute difference on the raw exposure.  With ``u = w / n`` (so ``sum u = 1``)
the weighted, weight-centred distance covariance is

    V^2 = u'(A*C)u - 2 sum_i u_i (Au)_i (Cu)_i + (u'Au)(u'Cu)

which reduces to the classical V-statistic when ``u`` is uniform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data_model import WeightDiagnostics


def _as_weights(w, n: int | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or (n is not None and w.size != n):
        raise ValueError("weights must be a vector matching the data")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    s = w.sum()
    if s <= 0:
        raise ValueError("weights are all zero")
    return w * (w.size / s)


def ess(w) -> float:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    top = w.max() if w.size else 0.0
    if not top > 0:
        raise ValueError("weights are all zero")
    w = w / top  # scale invariant; avoids under/overflow in the squares
    return float(w.sum() ** 2 / np.dot(w, w))


def weighted_correlation(a, c, w) -> float:
    """Weighted covariance of ``a`` and ``c`` over the product of unweighted SDs."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    w = _as_weights(w, a.size)
    sa, sc = a.std(), c.std()
    if sa == 0 or sc == 0:
        raise ValueError("zero unweighted standard deviation")
    ma = np.mean(w * a)
    mc = np.mean(w * c)
    return float((np.mean(w * a * c) - ma * mc) / (sa * sc))


def weighted_correlations(a, cmat, w) -> np.ndarray:
    """Vector version of :func:`weighted_correlation` over the columns of ``cmat``."""
    a = np.asarray(a, dtype=float)
    cmat = np.asarray(cmat, dtype=float)
    w = _as_weights(w, a.size)
    sa, sc = a.std(), cmat.std(axis=0)
    if sa == 0 or np.any(sc == 0):
        raise ValueError("zero unweighted standard deviation")
    wa = w * a
    cov = (wa @ cmat) / a.size - wa.mean() * ((w @ cmat) / a.size)
    return cov / (sa * sc)


def standardize_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


# ----------------------------------------------------------------------------
# one-dimensional bilinear forms sum_ij u_i v_j |x_i - x_j| in O(n log n)
# ----------------------------------------------------------------------------


def abs_bilinear(x, u, v) -> float:
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    xs, us, vs = x[order], np.asarray(u, float)[order], np.asarray(v, float)[order]
    # exclusive prefix sums
    cu = np.concatenate(([0.0], np.cumsum(us)[:-1]))
    cv = np.concatenate(([0.0], np.cumsum(vs)[:-1]))
    cux = np.concatenate(([0.0], np.cumsum(us * xs)[:-1]))
    cvx = np.concatenate(([0.0], np.cumsum(vs * xs)[:-1]))
    return float(np.sum(xs * (us * cv + vs * cu) - (us * cvx + vs * cux)))


def energy_distance_1d(x, w) -> float:
    x = np.asarray(x, dtype=float)
    n = x.size
    w = _as_weights(w, n)
    one = np.ones(n)
    return (2 * abs_bilinear(x, w, one) - abs_bilinear(x, w, w) - abs_bilinear(x, one, one)) / n**2


def _distance_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.abs(x[:, None] - x[None, :])
    return cdist(x, x)


def energy_distance_weighted(x, w) -> float:
    """Energy distance between the ``w``-weighted and unweighted samples of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 or x.shape[1] == 1:
        return energy_distance_1d(x.reshape(-1), w)
    n = x.shape[0]
    w = _as_weights(w, n)
    M = _distance_matrix(x)
    row = M.sum(axis=1)
    return float((2 * w @ row - w @ (M @ w) - row.sum()) / n**2)


def weighted_dcov(a, cmat, w) -> float:
    a = np.asarray(a, dtype=float)
    n = a.size
    u = _as_weights(w, n) / n
    A = _distance_matrix(a)
    C = _distance_matrix(np.asarray(cmat, dtype=float))
    Au, Cu = A @ u, C @ u
    return float(u @ ((A * C) @ u) - 2 * np.sum(u * Au * Cu) + (u @ Au) * (u @ Cu))


def dcov_classical(a, cmat) -> float:
    """Squared distance covariance by explicit double centring (V-statistic)."""
    A = _distance_matrix(np.asarray(a, float))
    C = _distance_matrix(np.asarray(cmat, float))

    def centre(M):
        return M - M.mean(axis=0) - M.mean(axis=1)[:, None] + M.mean()

    return float(np.mean(centre(A) * centre(C)))


class PairwiseSystem:
    """Distance structure for ``D(w)`` with a small number of exposure levels.

    Holds the dense covariate distance matrix; exposure distances are applied
    through per-level sums so ``A @ v`` is ``O(n K)``.  One product of ``C``
    with ``K + 1`` columns per call yields every matrix-vector product the
    objective and its gradient need.
    """

    def __init__(self, a, cmat_std):
        a = np.asarray(a, dtype=float)
        self.n = a.size
        self.levels, self.level_index = np.unique(a, return_inverse=True)
        self.K = self.levels.size
        # |a_i - level_k|
        self.dist_to_level = np.abs(a[:, None] - self.levels[None, :])
        self.C = _distance_matrix(cmat_std)
        self.c_rowmean = self.C.mean(axis=1)
        counts = np.bincount(self.level_index, minlength=self.K)
        self.a_rowmean = self.dist_to_level @ counts / self.n
        self.c_grand = float(self.c_rowmean.mean())
        self.a_grand = float(self.a_rowmean.mean())
        self.onehot = np.zeros((self.n, self.K))
        self.onehot[np.arange(self.n), self.level_index] = 1.0

    def a_apply(self, v: np.ndarray) -> np.ndarray:
        return self.dist_to_level @ np.bincount(self.level_index, weights=v, minlength=self.K)

    def evaluate(self, u: np.ndarray, want_grad: bool = True):
        """``D`` at ``w = n u`` and its gradient with respect to ``u``."""
        Au = self.a_apply(u)
        cols = np.empty((self.n, self.K + 1))
        cols[:, : self.K] = self.onehot * u[:, None]
        cols[:, self.K] = u * Au
        prod = self.C @ cols
        CU = prod[:, : self.K]
        Cu = CU.sum(axis=1)
        ACu = np.einsum("ik,ik->i", self.dist_to_level, CU)  # (A o C) u
        uAu, uCu = float(u @ Au), float(u @ Cu)
        dcov = float(u @ ACu) - 2 * float(np.sum(u * Au * Cu)) + uAu * uCu
        eps_c = 2 * float(u @ self.c_rowmean) - uCu - self.c_grand
        eps_a = 2 * float(u @ self.a_rowmean) - uAu - self.a_grand
        value = dcov + eps_c + eps_a
        if not want_grad:
            return value, (dcov, eps_c, eps_a), None
        g = 2 * ACu - 2 * (Au * Cu + self.a_apply(u * Cu) + prod[:, self.K])
        g += 2 * Au * uCu + 2 * Cu * uAu
        g += 2 * self.c_rowmean - 2 * Cu
        g += 2 * self.a_rowmean - 2 * Au
        return value, (dcov, eps_c, eps_a), g


def dependence_components(a, cmat, w) -> tuple[float, float, float]:
    """``(V^2, eps_C joint, eps_A)`` with covariates standardised."""
    a = np.asarray(a, dtype=float)
    u = _as_weights(w, a.size) / a.size
    cstd = standardize_columns(cmat)
    if np.unique(a).size <= 64:
        _, parts, _ = PairwiseSystem(a, cstd).evaluate(u, want_grad=False)
        return parts
    dcov = weighted_dcov(a, cstd, u)
    return dcov, energy_distance_weighted(cstd, u), energy_distance_weighted(a, u)


def dependence_metric(a, cmat, w) -> float:
    return float(sum(dependence_components(a, cmat, w)))


def weight_diagnostics(a, cmat, w, level: str = "full") -> WeightDiagnostics:
    """Diagnostics for one weight vector; ``level`` is ``full`` or ``basic``."""
    cmat = np.asarray(cmat, dtype=float)
    rho = np.abs(weighted_correlations(a, cmat, w))
    nan = float("nan")
    if level == "basic":
        return WeightDiagnostics(ess(w), tuple(float(r) for r in rho), float(rho.mean()), nan, nan, nan, nan, nan)
    dcov, eps_c_joint, eps_a = dependence_components(a, cmat, w)
    cstd = standardize_columns(cmat)
    eps_c = float(np.mean([energy_distance_1d(cstd[:, j], w) for j in range(cstd.shape[1])]))
    return WeightDiagnostics(
        ess=ess(w),
        rho_w=tuple(float(r) for r in rho),
        mean_abs_rho=float(rho.mean()),
        d_w=dcov + eps_c_joint + eps_a,
        eps_a=eps_a,
        eps_c=eps_c,
        dcov_w=dcov,
        eps_c_joint=eps_c_joint,
    )


# ----------------------------------------------------------------------------
# Table-style balance report
# ----------------------------------------------------------------------------

REPORT_COLUMNS = (
    "method", "winsorised", "n_reps",
    "ess_mean", "ess_sd", "ess_p05", "ess_p95",
    "rho_mean", "rho_sd", "rho_p95", "rho_max",
    "d_w", "eps_a", "eps_c",
)


@dataclass(frozen=True)
class BalanceRow:
    method: str
    winsorised: bool
    n_reps: int
    ess_mean: float
    ess_sd: float
    ess_p05: float
    ess_p95: float
    rho_mean: float
    rho_sd: float
    rho_p95: float
    rho_max: float
    d_w: float
    eps_a: float
    eps_c: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def balance_report(diagnostics: dict) -> list[BalanceRow]:
    """Summarise diagnostics per ``(method, winsorised)`` key.

    ``diagnostics`` maps ``(method, winsorised)`` to a list of
    :class:`WeightDiagnostics`, one per replication.  ``rho`` summaries pool
    the per-replication mean absolute correlations.
    """
    rows = []
    for (method, wins), diags in diagnostics.items():
        if not diags:
            continue
        e = np.array([d.ess for d in diags])
        r = np.array([d.mean_abs_rho for d in diags])
        sd = lambda x: float(x.std(ddof=1)) if x.size > 1 else 0.0  # noqa: E731
        rows.append(BalanceRow(
            method=str(method), winsorised=bool(wins), n_reps=len(diags),
            ess_mean=float(e.mean()), ess_sd=sd(e),
            ess_p05=float(np.quantile(e, 0.05)), ess_p95=float(np.quantile(e, 0.95)),
            rho_mean=float(r.mean()), rho_sd=sd(r),
            rho_p95=float(np.quantile(r, 0.95)), rho_max=float(r.max()),
            d_w=_nanmean([d.d_w for d in diags]),
            eps_a=_nanmean([d.eps_a for d in diags]),
            eps_c=_nanmean([d.eps_c for d in diags]),
        ))
    return rows
