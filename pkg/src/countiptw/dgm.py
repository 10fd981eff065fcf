"""Data-generating mechanisms: covariates, truncated count exposure, outcome."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data_model import Dataset, ScenarioConfig
from .rng import RngStream

MAX_REDRAWS = 10**6


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgmParams:
    beta: tuple[float, float, float, float]
    gamma: tuple[float, float, float, float, float]
    k: float
    sigma: np.ndarray
    a_max: int
    exposure_dgm: str

    def __post_init__(self) -> None:
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (3, 3) or not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be a symmetric 3x3 matrix")
        if not np.allclose(np.diag(sigma), 1.0):
            raise ValueError("sigma must have unit diagonal")
        if np.linalg.eigvalsh(sigma).min() < -1e-12:
            raise ValueError("sigma must be positive semi-definite")
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.exposure_dgm not in ("negbin", "poisson"):
            raise ValueError("exposure_dgm must be negbin or poisson")
        object.__setattr__(self, "sigma", sigma)


def default_params(exposure_dgm: str, true_rr: float, a_max: int = 10) -> DgmParams:
    if not true_rr > 0:
        raise ValueError("true_rr must be positive")
    sigma = np.full((3, 3), 0.3)
    np.fill_diagonal(sigma, 1.0)
    return DgmParams(
        beta=(math.log(1.5), 0.4, 0.1, 0.1),
        gamma=(math.log(0.03), math.log(true_rr), math.log(1.4), math.log(1.1), math.log(1.1)),
        k=1.3,
        sigma=sigma,
        a_max=a_max,
        exposure_dgm=exposure_dgm,
    )


def generate_covariates(n: int, params: DgmParams, rng: RngStream):
    if n < 1:
        raise ValueError("n must be at least 1")
    raw = rng.multivariate_normal(np.zeros(3), params.sigma, n)
    c1 = (raw[:, 0] > 0).astype(float)
    return c1, raw[:, 1].copy(), raw[:, 2].copy()


class ExposureDraw(NamedTuple):
    a: np.ndarray
    true_lambda: np.ndarray
    redrawn_share: float  # rows whose first draw exceeded a_max


def generate_exposure(covariates, params: DgmParams, rng: RngStream) -> ExposureDraw:
    c1, c2, c3 = covariates
    b0, b1, b2, b3 = params.beta
    lam = np.exp(b0 + b1 * np.asarray(c1) + b2 * np.asarray(c2) + b3 * np.asarray(c3))

    def draw(mu):
        if params.exposure_dgm == "negbin":
            return rng.neg_binomial(mu, params.k)
        return rng.poisson(mu)

    a = draw(lam).astype(float)
    over = np.flatnonzero(a > params.a_max)
    redrawn_share = over.size / max(len(a), 1)
    for _ in range(MAX_REDRAWS):
        if over.size == 0:
            break
        a[over] = draw(lam[over])
        over = over[a[over] > params.a_max]
    else:
        raise GenerationError("exposure rejection sampling exceeded the redraw bound")
    return ExposureDraw(a, lam, redrawn_share)


def outcome_probability(covariates, a, params: DgmParams) -> np.ndarray:
    c1, c2, c3 = covariates
    g0, g1, g2, g3, g4 = params.gamma
    return np.exp(g0 + g1 * np.asarray(a) + g2 * np.asarray(c1) + g3 * np.asarray(c2) + g4 * np.asarray(c3))


def generate_outcome(covariates, a, params: DgmParams, rng: RngStream):
    pi = outcome_probability(covariates, a, params)
    if np.any(pi >= 1):
        raise GenerationError(f"outcome probability >= 1 for {int(np.sum(pi >= 1))} row(s)")
    return rng.bernoulli(pi), pi


def generate_dataset(config: ScenarioConfig, rng: RngStream, n: int | None = None) -> Dataset:
    """Simulate one complete dataset for the scenario's DGM."""
    params = default_params(config.exposure_dgm, config.true_rr, config.a_max)
    n = config.n_obs if n is None else n
    cov = generate_covariates(n, params, rng)
    draw = generate_exposure(cov, params, rng)
    y, pi = generate_outcome(cov, draw.a, params, rng)
    return Dataset(
        c1=cov[0], c2=cov[1], c3=cov[2], a=draw.a, y=y,
        true_lambda=draw.true_lambda, true_pi=pi, a_max=params.a_max,
    )


def sample_characteristics(ds: Dataset, redrawn_share: float | None = None) -> dict[str, float]:
    """Marginal summaries of a simulated sample.

    Includes the realised point-biserial correlations of the dichotomised
    ``c1`` with ``c2`` and ``c3``; no target value is implied for them.
    """
    a = ds.a
    out = {
        "n": float(ds.n),
        "a_mean": float(a.mean()),
        "a_sd": float(a.std(ddof=1)),
        "a_median": float(np.median(a)),
        "a_q25": float(np.quantile(a, 0.25)),
        "a_q75": float(np.quantile(a, 0.75)),
        "y_prevalence": float(ds.y.mean()),
        "corr_c1_c2": float(np.corrcoef(ds.c1, ds.c2)[0, 1]),
        "corr_c1_c3": float(np.corrcoef(ds.c1, ds.c3)[0, 1]),
        "corr_c2_c3": float(np.corrcoef(ds.c2, ds.c3)[0, 1]),
    }
    if redrawn_share is not None:
        out["redrawn_share"] = float(redrawn_share)
    return out
