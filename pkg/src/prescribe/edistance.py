"""Energy distance between cell populations and the pseudo E-distance score."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError


@dataclass(frozen=True)
class EDistStats:
    """Pairwise distance, both self-distances and ``e = 2 delta - sigma_x - sigma_y``."""

    delta_xy: float
    sigma_x: float
    sigma_y: float
    e: float


def _as_cells(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a cells x features matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def _pair_sum(D: np.ndarray) -> float:
    # fsum keeps the reduction independent of blocking and order
    return math.fsum(D.ravel().tolist())


def self_distance(X) -> float:
    """``1/(n(n-1)) * sum_ij ||x_i - x_j||`` over all ordered pairs."""
    X = _as_cells(X, "X")
    n = X.shape[0]
    if n < 2:
        raise DomainError(f"self-distance needs at least 2 cells, got {n}")
    return _pair_sum(cdist(X, X)) / (n * (n - 1))


def pairwise_distance(X, Y) -> float:
    """``1/(n m) * sum_ij ||x_i - y_j||``."""
    X, Y = _as_cells(X, "X"), _as_cells(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return _pair_sum(cdist(X, Y)) / (X.shape[0] * Y.shape[0])


def e_distance(X, Y, subsample: int | None = None, rng: np.random.Generator | None = None) -> EDistStats:
    """E-distance between two populations.

    With ``subsample`` both populations are reduced (without replacement) to
    ``min(subsample, rows)`` cells drawn from ``rng``.
    """
    X, Y = _as_cells(X, "X"), _as_cells(Y, "Y")
    if subsample is not None:
        if rng is None:
            raise ValueError("subsampling requires an explicit generator")
        X = _subsample(X, subsample, rng)
        Y = _subsample(Y, subsample, rng)
    delta = pairwise_distance(X, Y)
    sx, sy = self_distance(X), self_distance(Y)
    return EDistStats(delta, sx, sy, 2.0 * delta - sx - sy)


def _subsample(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k >= X.shape[0]:
        return X
    idx = np.sort(rng.choice(X.shape[0], size=k, replace=False))
    return X[idx]


@dataclass(frozen=True)
class BandMap:
    """Affine map of a reference ``[lo, hi]`` onto ``[N, 2N]`` with clamping."""

    lo: float
    hi: float
    n_dim: int

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DomainError(f"constant reference set: min={self.lo}, max={self.hi}")

    @classmethod
    def fit(cls, reference, n_dim: int) -> "BandMap":
        reference = np.asarray(reference, dtype=float)
        if reference.size == 0:
            raise DomainError("empty reference set")
        return cls(float(np.min(reference)), float(np.max(reference)), n_dim)

    def __call__(self, values):
        values = np.asarray(values, dtype=float)
        scaled = self.n_dim + self.n_dim * (values - self.lo) / (self.hi - self.lo)
        return np.clip(scaled, self.n_dim, 2 * self.n_dim)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n_dim": self.n_dim}


def minmax_to_band(values, n_dim: int, reference=None):
    """Map ``values`` onto ``[N, 2N]`` using min/max of ``reference`` (default: the values).

    Returns the mapped values and the fitted :class:`BandMap`.
    """
    band = BandMap.fit(values if reference is None else reference, n_dim)
    return band(values), band


def pseudo_e(nu_tilde, h_tilde, n_dim: int):
    """``2 nu_tilde - h_tilde`` for band-limited evidence and entropy, in ``[0, 3N]``."""
    nu_tilde = np.asarray(nu_tilde, dtype=float)
    h_tilde = np.asarray(h_tilde, dtype=float)
    tol = 1e-9 * n_dim
    for name, v in (("nu_tilde", nu_tilde), ("h_tilde", h_tilde)):
        if np.any(v < n_dim - tol) or np.any(v > 2 * n_dim + tol):
            raise DomainError(f"{name} outside [{n_dim}, {2 * n_dim}]")
    out = 2.0 * nu_tilde - h_tilde
    return float(out) if out.ndim == 0 else out
