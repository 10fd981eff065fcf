"""Stabilised weights for a count exposure."""
from __future__ import annotations

from ..data_model import Dataset, EnergySettings, GbmSettings, MethodId
from .base import StandardizedDesign, WeightError, WeightVector, standardize, winsorise
from .cbps import cbps_weights
from .energy import energy_weights, project_simplex
from .gbm import GbmModel, gbm_weights
from .multinomial import collapse_rare_levels, multinomial_weights
from .npcbps import npcbps_weights

__all__ = [
    "StandardizedDesign", "WeightError", "WeightVector", "GbmModel",
    "standardize", "winsorise", "collapse_rare_levels", "project_simplex",
    "multinomial_weights", "cbps_weights", "npcbps_weights", "gbm_weights", "energy_weights",
    "compute_weights",
]


def compute_weights(
    ds: Dataset,
    method: MethodId | str,
    gbm: GbmSettings | None = None,
    energy: EnergySettings | None = None,
) -> WeightVector:
    """Dispatch to the estimator for ``method`` (a weighting method)."""
    method = MethodId(method)
    if method is MethodId.MULTINOMIAL:
        return multinomial_weights(ds)
    if method is MethodId.CBPS:
        return cbps_weights(ds)
    if method is MethodId.NPCBPS:
        return npcbps_weights(ds)
    if method is MethodId.GBM:
        return gbm_weights(ds, gbm)[0]
    if method is MethodId.ENERGY:
        return energy_weights(ds, energy)
    raise ValueError(f"{method} is not a weighting method")
