"""Multinomial-logit propensity weights for a binned count exposure."""
from __future__ import annotations

import numpy as np

from ..data_model import Dataset, MethodId
from ..glm import GlmError, fit_multinomial, predict_probs
from .base import WeightError, WeightVector, design_from


def collapse_rare_levels(a, threshold: float = 0.01) -> tuple[np.ndarray, dict]:
    """Merge sparse exposure levels into their neighbours.

    The highest level below ``threshold`` prevalence is merged into the next
    lower bin (or the next higher one when it is already the lowest) until
    every bin reaches the threshold.  Returns labels ``1..K`` and the mapping
    from original value to label; the mapping preserves order.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0 or np.any(np.isnan(a)):
        raise WeightError("exposure must be non-missing")
    values, counts = np.unique(a, return_counts=True)
    bins = [[v] for v in values]
    freq = list(counts.astype(float) / a.size)
    while len(bins) > 1:
        rare = [i for i, f in enumerate(freq) if f < threshold]
        if not rare:
            break
        i = rare[-1]
        j = i - 1 if i > 0 else 1
        lo, hi = min(i, j), max(i, j)
        bins[lo] = bins[lo] + bins[hi]
        freq[lo] += freq[hi]
        del bins[hi], freq[hi]
    if len(bins) < 2:
        raise WeightError("exposure has fewer than two levels after collapsing")
    mapping = {float(v): k + 1 for k, b in enumerate(bins) for v in b}
    labels = np.searchsorted(np.array([b[0] for b in bins]), a, side="right").astype(int)
    return labels, mapping


def multinomial_weights(ds: Dataset, threshold: float = 0.01) -> WeightVector:
    a, cmat = design_from(ds)
    labels, mapping = collapse_rare_levels(a, threshold)
    X = np.column_stack([np.ones(len(a)), cmat])
    try:
        fit = fit_multinomial(X, labels)
    except GlmError as exc:
        raise WeightError(f"multinomial: {exc}") from exc
    if not fit.converged:
        raise WeightError("multinomial: Newton iterations did not converge")
    probs = predict_probs(fit, X)
    freq = np.bincount(labels, minlength=fit.n_categories + 1)[1:] / len(a)
    num = freq[labels - 1]
    den = probs[np.arange(len(a)), labels - 1]
    return WeightVector(num / den, MethodId.MULTINOMIAL, num, den,
                        info={"n_bins": fit.n_categories, "mapping": mapping})
