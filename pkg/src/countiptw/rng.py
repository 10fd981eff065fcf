"""Deterministic, splittable random streams.

Streams are Philox (counter-based) generators keyed by a ``SeedSequence``
whose spawn key encodes ``(index, *purpose)``.  Deriving stream ``i`` is O(1)
and does not depend on how many other streams were created, so replication
``r`` reproduces bit-for-bit regardless of worker count or scheduling order.
"""
from __future__ import annotations

import numpy as np

# Spawn-key slot reserved for streams that are not tied to a replication
# (e.g. the MAR calibration reference sample).
RESERVED_INDEX = 2**63


class RngStream:
    """A single-owner random stream; see :func:`substream`."""

    def __init__(self, seed: int, stream_index: int, purpose: tuple[int, ...] = ()):
        if not (0 <= seed < 2**64) or not (0 <= stream_index < 2**64):
            raise ValueError("seed and stream_index must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_index = int(stream_index)
        self.purpose = tuple(int(p) for p in purpose)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_index, *self.purpose))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, index={self.stream_index}, purpose={self.purpose})"

    def child(self, *purpose: int) -> "RngStream":
        """Independent stream for a named sub-task of this stream's owner."""
        return RngStream(self.seed, self.stream_index, self.purpose + tuple(purpose))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def multivariate_normal(self, mean, cov, size: int) -> np.ndarray:
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        k = mean.shape[0]
        if cov.shape != (k, k) or not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be a symmetric matrix matching mean")
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() < -1e-10 * max(1.0, evals.max()):
            raise ValueError("covariance is not positive semi-definite")
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        z = self._gen.standard_normal((size, k))
        return mean + z @ root.T

    def poisson(self, lam):
        lam = np.asarray(lam, dtype=float)
        if np.any(~(lam > 0)):
            raise ValueError("Poisson mean must be positive")
        return self._gen.poisson(lam)

    def neg_binomial(self, lam, k: float):
        """Negative binomial with mean ``lam`` and variance ``lam + lam**2 / k``.

        Drawn as a Poisson-Gamma mixture: ``Pois(G)``, ``G ~ Gamma(k, lam / k)``.
        """
        lam = np.asarray(lam, dtype=float)
        if not (k > 0):
            raise ValueError("dispersion k must be positive")
        if np.any(~(lam > 0)):
            raise ValueError("negative binomial mean must be positive")
        g = self._gen.gamma(k, lam / k)
        return self._gen.poisson(g)

    def bernoulli(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
            raise ValueError("bernoulli probability must lie in [0, 1]")
        return (self._gen.random(p.shape) < p).astype(float)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, values, size=None):
        return self._gen.choice(values, size=size)

    def chisquare(self, df: float):
        return self._gen.chisquare(df)

    def permutation(self, x):
        return self._gen.permutation(x)


def substream(seed: int, index: int) -> RngStream:
    """The ``index``-th stream derived from ``seed``."""
    return RngStream(seed, index)
