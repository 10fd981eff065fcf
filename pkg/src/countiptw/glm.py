"""IRLS for Poisson, logistic and Gaussian GLMs with HC0 sandwich covariance,
and Newton-Raphson for baseline-category multinomial logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

FAMILIES = ("poisson_log", "binomial_logit", "gaussian_identity")


class GlmError(RuntimeError):
    pass


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    cov_model: np.ndarray
    cov_sandwich: np.ndarray | None
    fitted_mu: np.ndarray
    dispersion: float
    converged: bool
    iterations: int
    family: str

    @property
    def se_sandwich(self) -> np.ndarray:
        if self.cov_sandwich is None:
            raise GlmError("sandwich covariance was not requested")
        return np.sqrt(np.diag(self.cov_sandwich))


def _solve_sym(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with a trace-scaled ridge fallback."""
    try:
        c = np.linalg.cholesky(mat)
        return _chol_solve(c, rhs)
    except np.linalg.LinAlgError:
        scale = np.trace(mat) / mat.shape[0]
        if not (np.isfinite(scale) and scale > 0):
            raise GlmError("design matrix is rank deficient") from None
        ridge = 1e-8 * scale
        try:
            c = np.linalg.cholesky(mat + ridge * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            raise GlmError("design matrix is rank deficient") from None
        return _chol_solve(c, rhs)


def _chol_solve(c: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    z = solve_triangular(c, rhs, lower=True)
    return solve_triangular(c.T, z, lower=False)


def _inv_sym(mat: np.ndarray) -> np.ndarray:
    inv = _solve_sym(mat, np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def _mean_and_var(family: str, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if family == "poisson_log":
        mu = np.exp(np.clip(eta, -700, 700))
        return mu, mu
    if family == "binomial_logit":
        mu = expit(eta)
        return mu, mu * (1 - mu)
    return eta, np.ones_like(eta)


def _deviance(family: str, y: np.ndarray, mu: np.ndarray, w: np.ndarray) -> float:
    if family == "poisson_log":
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2 * np.sum(w * (t - (y - mu))))
    if family == "binomial_logit":
        eps = 1e-300
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(y > 0, y * np.log(y / np.maximum(mu, eps)), 0.0)
            t0 = np.where(y < 1, (1 - y) * np.log((1 - y) / np.maximum(1 - mu, eps)), 0.0)
        return float(2 * np.sum(w * (t1 + t0)))
    return float(np.sum(w * (y - mu) ** 2))


def log_likelihood(family: str, X: np.ndarray, y: np.ndarray, beta: np.ndarray, w=None) -> float:
    """Weighted log-likelihood up to terms free of ``beta``."""
    w = np.ones(len(y)) if w is None else np.asarray(w, float)
    eta = X @ beta
    if family == "poisson_log":
        return float(np.sum(w * (y * eta - np.exp(eta))))
    if family == "binomial_logit":
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))
    return float(-0.5 * np.sum(w * (y - eta) ** 2))


def fit_glm(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "poisson_log",
    prior_weights: np.ndarray | None = None,
    want_sandwich: bool = False,
    max_iter: int = 100,
    tol: float = 1e-9,
    score_tol: float = 1e-8,
) -> GlmFit:
    """Weighted maximum likelihood by iteratively reweighted least squares.

    The sandwich is HC0 with prior weights treated as known: bread
    ``X' diag(w v(mu)) X``, meat ``sum_i (w_i (y_i - mu_i))^2 x_i x_i'``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if prior_weights is None else np.asarray(prior_weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("prior weights must be finite and non-negative")
    if family == "poisson_log" and np.any(y < 0):
        raise ValueError("Poisson response must be non-negative")
    if family == "binomial_logit" and np.any((y < 0) | (y > 1)):
        raise ValueError("binomial response must lie in [0, 1]")

    if family == "gaussian_identity":
        xtwx = X.T @ (w[:, None] * X)
        beta = _solve_sym(xtwx, X.T @ (w * y))
        converged, it = True, 1
    else:
        ybar = np.sum(w * y) / np.sum(w)
        if family == "poisson_log":
            mu = (y + ybar) / 2 + 0.1
            eta = np.log(mu)
        else:
            mu = (w * y + 0.5) / (w + 1.0)
            eta = np.log(mu / (1 - mu))
        beta = np.zeros(p)
        dev_old = np.inf
        converged = False
        for it in range(1, max_iter + 1):
            mu, var = _mean_and_var(family, eta)
            # canonical links: working weight = var, z = eta + (y - mu) / var
            ww = w * var
            z = eta + (y - mu) / np.maximum(var, 1e-300)
            xtwx = X.T @ (ww[:, None] * X)
            beta_new = _solve_sym(xtwx, X.T @ (ww * z))
            eta_new = X @ beta_new
            mu_new, _ = _mean_and_var(family, eta_new)
            dev = _deviance(family, y, mu_new, w)
            # step-halving if the deviance blows up
            halvings = 0
            while not np.isfinite(dev) or (dev > dev_old * (1 + 1e-7) + 1e-12 and halvings < 30):
                beta_new = 0.5 * (beta_new + beta)
                eta_new = X @ beta_new
                mu_new, _ = _mean_and_var(family, eta_new)
                dev = _deviance(family, y, mu_new, w)
                halvings += 1
            beta, eta = beta_new, eta_new
            score = X.T @ (w * (y - mu_new))
            rel = abs(dev - dev_old) / (abs(dev) + 0.1)
            dev_old = dev
            if rel < tol or np.max(np.abs(score)) < score_tol:
                converged = True
                break

    eta = X @ beta
    mu, var = _mean_and_var(family, eta)
    bread = X.T @ ((w * var)[:, None] * X)
    if family == "gaussian_identity":
        wsum = np.sum(w)
        dispersion = float(np.sum(w * (y - mu) ** 2) / max(wsum - p, 1.0))
        cov_model = dispersion * _inv_sym(bread)
    else:
        dispersion = 1.0
        cov_model = _inv_sym(bread)
    cov_sw = None
    if want_sandwich:
        binv = _inv_sym(bread)
        u = (w * (y - mu))[:, None] * X
        meat = u.T @ u
        cov_sw = binv @ meat @ binv
        cov_sw = 0.5 * (cov_sw + cov_sw.T)
    return GlmFit(beta, cov_model, cov_sw, mu, dispersion, converged, it, family)


# --------------------------------------------------------------------------
# Multinomial logit
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MultinomialFit:
    """Baseline-category logit; ``coefficients[k - 2]`` belongs to category k.

    Category 1 is the reference with linear predictor fixed at zero.
    """

    coefficients: np.ndarray  # (K - 1, p)
    n_categories: int
    converged: bool
    iterations: int


def _linear_predictors(coef: np.ndarray, X: np.ndarray) -> np.ndarray:
    eta = X @ coef.T
    return np.column_stack([np.zeros(X.shape[0]), eta])


def predict_probs(fit: MultinomialFit, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != fit.coefficients.shape[1]:
        raise ValueError(f"X must have {fit.coefficients.shape[1]} columns")
    return softmax(_linear_predictors(fit.coefficients, X), axis=1)


def fit_multinomial(
    X: np.ndarray, categories: np.ndarray, max_iter: int = 200, tol: float = 1e-8
) -> MultinomialFit:
    """Newton-Raphson on the multinomial log-likelihood.

    ``categories`` holds integer labels ``1..K``; every label must occur.
    """
    X = np.asarray(X, dtype=float)
    cat = np.asarray(categories).astype(int)
    n, p = X.shape
    K = int(cat.max()) if cat.size else 0
    if K < 2 or cat.min() < 1:
        raise GlmError("need labels 1..K with K >= 2")
    counts = np.bincount(cat, minlength=K + 1)[1:]
    if np.any(counts == 0):
        missing = [k + 1 for k in np.flatnonzero(counts == 0)]
        raise GlmError(f"category {missing} absent; collapse levels first")
    Y = np.zeros((n, K))
    Y[np.arange(n), cat - 1] = 1.0
    q = K - 1
    coef = np.zeros((q, p))
    # start from the intercept-only solution when the first column is constant
    if np.allclose(X[:, 0], 1.0):
        coef[:, 0] = np.log(counts[1:] / counts[0])

    def loglik(c):
        return float(np.sum(Y * log_softmax(_linear_predictors(c, X), axis=1)))

    ll = loglik(coef)
    converged = False
    for it in range(1, max_iter + 1):
        P = softmax(_linear_predictors(coef, X), axis=1)[:, 1:]
        R = Y[:, 1:] - P
        grad = (R.T @ X).reshape(-1)  # ordered (k, j)
        # Hessian of the negative log-likelihood: sum_i (diag(P) - PP') kron x x'
        H = np.empty((q, p, q, p))
        for a in range(q):
            for b in range(a, q):
                s = P[:, a] * ((a == b) - P[:, b])
                blk = X.T @ (s[:, None] * X)
                H[a, :, b, :] = blk
                H[b, :, a, :] = blk.T
        H = H.reshape(q * p, q * p)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-8 * np.eye(q * p), grad)
        t = 1.0
        while True:
            new = coef + t * step.reshape(q, p)
            ll_new = loglik(new)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        coef, ll = new, ll_new
        if np.max(np.abs(step)) * t < tol:
            converged = True
            break
    return MultinomialFit(coef, K, converged, it)
