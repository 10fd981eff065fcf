"""Shared weight types, covariate standardisation and winsorisation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..data_model import Dataset, MethodId


class WeightError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightVector:
    """Stabilised weights, with the density ratio behind them when there is one."""

    w: np.ndarray
    method: MethodId
    numerator: np.ndarray | None = None
    denominator: np.ndarray | None = None
    winsorised_at: float | None = None
    info: dict | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise WeightError(f"{self.method}: weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "method", MethodId(self.method))

    @property
    def n(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class StandardizedDesign:
    """Standardised exposure and whitened covariates.

    ``a_star`` has mean 0 and sample SD 1; ``c_star`` is centred and
    multiplied by the inverse Cholesky factor of the sample covariance, so
    its sample covariance is the identity.
    """

    a_star: np.ndarray
    c_star: np.ndarray
    a_mean: float
    a_sd: float
    c_mean: np.ndarray
    whitening: np.ndarray  # c_star = (c - c_mean) @ whitening


def standardize(a, cmat) -> StandardizedDesign:
    a = np.asarray(a, dtype=float)
    cmat = np.asarray(cmat, dtype=float)
    sd = a.std(ddof=1)
    if not sd > 0:
        raise WeightError("exposure is constant")
    cm = cmat.mean(axis=0)
    centred = cmat - cm
    cov = centred.T @ centred / (len(a) - 1)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise WeightError("covariate matrix is not full rank") from None
    whitening = np.linalg.inv(L).T
    return StandardizedDesign((a - a.mean()) / sd, centred @ whitening, float(a.mean()), float(sd), cm, whitening)


def design_from(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Exposure and covariate matrix of a complete dataset."""
    if not ds.is_complete:
        raise WeightError("weights need a complete dataset")
    return np.asarray(ds.a, dtype=float), ds.covariates


def winsorise(wv: WeightVector, percentile: float = 0.99) -> WeightVector:
    """Cap weights at their own ``percentile`` quantile (linear interpolation)."""
    if not 0 < percentile <= 1:
        raise ValueError("percentile must lie in (0, 1]")
    if percentile == 1.0:
        return wv
    q = float(np.quantile(wv.w, percentile))
    return replace(wv, w=np.minimum(wv.w, q), winsorised_at=percentile)


def normal_pdf(x, mean, var) -> np.ndarray:
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
