"""Gradient-boosted generalised propensity scores with balance-based stopping.

Boosting fits depth-limited least-squares regression trees to the residuals
of ``A`` on the covariates.  After every ``eval_every`` trees the weights

    w_i = f_A(a_i) / phi(a_i; m(c_i), sigma^2),   sigma^2 = mean residual^2

are formed with a normal numerator ``phi(a; mean(a), var(a))`` (or, on
request, a Gaussian-kernel density with Silverman bandwidth), and the
root mean square of the absolute weighted exposure-covariate correlations is
recorded.  The ensemble size minimising that criterion is kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data_model import Dataset, GbmSettings, MethodId
from ..diagnostics import weighted_correlations
from .base import WeightError, WeightVector, design_from, normal_pdf


@dataclass(frozen=True)
class RegressionTree:
    """Binary tree in array form; ``feature[k] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf constants (already scaled by the shrinkage)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        def d(k):
            return 0 if self.feature[k] < 0 else 1 + max(d(self.left[k]), d(self.right[k]))

        return d(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            k = node[idx]
            go_left = X[idx, self.feature[k]] <= self.threshold[k]
            node[idx] = np.where(go_left, self.left[k], self.right[k])
            active = self.feature[node] >= 0
        return self.value[node]


def silverman_bandwidth(x: np.ndarray) -> float:
    """``0.9 min(sd, IQR/1.34) n^(-1/5)`` with the usual fallbacks."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.quantile(x, [0.75, 0.25])
    lo = min(sd, (q75 - q25) / 1.34)
    if not lo > 0:
        lo = sd if sd > 0 else (abs(x[0]) if x[0] != 0 else 1.0)
    return 0.9 * lo * x.size ** (-0.2)


def kde_at_observed(x: np.ndarray, bw: float | None = None) -> np.ndarray:
    """Gaussian kernel density estimate of ``x`` evaluated at each ``x_i``."""
    x = np.asarray(x, dtype=float)
    h = silverman_bandwidth(x) if bw is None else bw
    vals, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    if vals.size <= 2000:
        dens = normal_pdf(vals[:, None], vals[None, :], h * h) @ counts / x.size
        return dens[inv]
    return np.array([np.mean(normal_pdf(v, x, h * h)) for v in x])


class _TreeBuilder:
    """Least-squares tree fitting on fixed features with presorted orders."""

    def __init__(self, X: np.ndarray, max_depth: int, min_node: int):
        self.X = X
        self.n, self.p = X.shape
        self.max_depth = max_depth
        self.min_node = min_node
        self.order = [np.argsort(X[:, j], kind="stable") for j in range(self.p)]

    def _best_split(self, sorted_idx, r):
        best = (0.0, -1, 0.0)
        m = sorted_idx[0].size
        lo, hi = self.min_node, m - self.min_node
        if hi < lo:
            return best
        total = None
        for j in range(self.p):
            idx = sorted_idx[j]
            xs = self.X[idx, j]
            cs = np.cumsum(r[idx])
            if total is None:
                total = cs[-1]
            # split after position k (left size k+1)
            k = np.arange(lo - 1, hi)
            valid = xs[k] < xs[k + 1]
            if not np.any(valid):
                continue
            k = k[valid]
            nl = k + 1.0
            sl = cs[k]
            gain = sl * sl / nl + (total - sl) ** 2 / (m - nl) - total * total / m
            b = int(np.argmax(gain))
            if gain[b] > best[0] * (1 + 1e-12) + 1e-300:
                best = (float(gain[b]), j, 0.5 * (xs[k[b]] + xs[k[b] + 1]))
        return best

    def fit(self, r: np.ndarray, shrinkage: float, max_splits: int | None = None):
        """Grow one tree on residuals ``r``.

        Nodes are split best-first (largest squared-error reduction among the
        current leaves) until ``max_splits`` splits are made or no leaf above
        depth ``max_depth`` can be split; ``max_splits=None`` grows the full
        depth-limited tree.
        """
        feature, threshold, left, right, value = [], [], [], [], []
        leaf_of = np.empty(self.n, dtype=int)

        def new_node():
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            return len(feature) - 1

        go_left = np.zeros(self.n, dtype=bool)

        def candidate(node, sorted_idx, depth):
            split = (0.0, -1, 0.0) if depth >= self.max_depth else self._best_split(sorted_idx, r)
            return [split[0], node, sorted_idx, depth, split]

        open_leaves = [candidate(new_node(), list(self.order), 0)]
        done = []
        budget = np.inf if max_splits is None else max_splits
        n_splits = 0
        while open_leaves:
            open_leaves.sort(key=lambda c: (-c[0], c[1]))
            gain, node, sorted_idx, depth, split = open_leaves.pop(0)
            if split[1] < 0 or n_splits >= budget:
                done.append((node, sorted_idx[0]))
                continue
            _, j, thr = split
            rows = sorted_idx[0]
            feature[node], threshold[node] = j, thr
            go_left[rows] = self.X[rows, j] <= thr
            li, ri = new_node(), new_node()
            left[node], right[node] = li, ri
            n_splits += 1
            open_leaves.append(candidate(li, [s[go_left[s]] for s in sorted_idx], depth + 1))
            open_leaves.append(candidate(ri, [s[~go_left[s]] for s in sorted_idx], depth + 1))
        for node, rows in done:
            value[node] = shrinkage * float(r[rows].mean())
            leaf_of[rows] = node
        tree = RegressionTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                              np.array(value))
        return tree, tree.value[leaf_of]


@dataclass
class GbmModel:
    m0: float
    trees: list[RegressionTree]
    shrinkage: float
    chosen_m: int
    residual_sd: float
    balance_path: np.ndarray  # criterion at evaluated_m
    evaluated_m: np.ndarray
    underfit_warning: bool = False
    settings: GbmSettings = field(default_factory=GbmSettings)

    def predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        n_trees = self.chosen_m if n_trees is None else n_trees
        out = np.full(np.asarray(X).shape[0], self.m0)
        for tree in self.trees[:n_trees]:
            out += tree.predict(X)
        return out


def _criterion(a, cmat, num, fitted) -> tuple[float, np.ndarray]:
    resid = a - fitted
    sigma2 = float(np.mean(resid * resid))
    den = normal_pdf(a, fitted, sigma2)
    w = num / den
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        return np.inf, w
    rho = weighted_correlations(a, cmat, w)
    return float(np.sqrt(np.mean(rho * rho))), w


def gbm_weights(ds: Dataset, settings: GbmSettings | None = None) -> tuple[WeightVector, GbmModel]:
    s = settings or GbmSettings()
    if s.max_trees < 1 or s.eval_every < 1 or s.max_depth < 1 or s.min_node < 1:
        raise ValueError("invalid boosting settings")
    a, cmat = design_from(ds)
    if a.std() == 0:
        raise WeightError("gbm: exposure is constant")
    if s.numerator == "kde":
        num = kde_at_observed(a)
    else:
        num = normal_pdf(a, a.mean(), a.var(ddof=1))
    builder = _TreeBuilder(cmat, s.max_depth, s.min_node)
    m0 = float(a.mean())
    fitted = np.full(a.size, m0)
    trees: list[RegressionTree] = []
    path, evaluated = [], []
    best = (np.inf, 0, None)
    for m in range(1, s.max_trees + 1):
        tree, step = builder.fit(a - fitted, s.shrinkage, s.max_splits or None)
        trees.append(tree)
        fitted = fitted + step
        if m % s.eval_every and m != s.max_trees:
            continue
        crit, w = _criterion(a, cmat, num, fitted)
        path.append(crit)
        evaluated.append(m)
        if crit < best[0]:
            best = (crit, m, w)
    if best[2] is None:
        raise WeightError("gbm: no finite balance criterion along the path")
    path_arr = np.array(path)
    tail = path_arr[-max(2, int(np.ceil(0.1 * path_arr.size))):]
    underfit = bool(tail.size > 1 and np.all(np.diff(tail) < 0))
    chosen = best[1]
    fitted_chosen = m0 + sum((t.predict(cmat) for t in trees[:chosen]), np.zeros(a.size))
    sigma2 = float(np.mean((a - fitted_chosen) ** 2))
    den = normal_pdf(a, fitted_chosen, sigma2)
    model = GbmModel(m0, trees, s.shrinkage, chosen, float(np.sqrt(sigma2)), path_arr,
                     np.array(evaluated), underfit, s)
    wv = WeightVector(num / den, MethodId.GBM, num, den, info={"chosen_m": chosen, "underfit": underfit})
    return wv, model
