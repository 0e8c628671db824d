"""Empirical W2 distances, V-hat, Gaussian closed forms and summary statistics.

Distances here use the unhalved squared Euclidean cost ``||x - y||^2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

# n x n cost matrices beyond this size are refused (about 3.2 GB in float64)
DEFAULT_MAX_ASSIGNMENT_SIZE = 20_000


def _points(a) -> np.ndarray:
    pts = np.asarray(getattr(a, "points", a), dtype=np.float64)
    return pts[:, None] if pts.ndim == 1 else pts


def squared_distances(X, Y) -> np.ndarray:
    """``||X_i - Y_j||^2`` accumulated coordinate by coordinate (no cancellation)."""
    X = _points(X)
    Y = _points(Y)
    out = np.zeros((X.shape[0], Y.shape[0]))
    for k in range(X.shape[1]):
        diff = X[:, k, None] - Y[None, :, k]
        out += diff * diff
    return out


@dataclass(frozen=True, eq=False)
class TransportPlanDiscrete:
    """Optimal permutation between two equal-size point clouds.

    ``cost`` is the mean squared displacement ``sum_i ||X_i - Y_perm[i]||^2 / n``.
    """

    assignment: np.ndarray
    cost: float


def optimal_assignment(X, Y, max_size: int = DEFAULT_MAX_ASSIGNMENT_SIZE) -> TransportPlanDiscrete:
    X = _points(X)
    Y = _points(Y)
    if X.shape != Y.shape:
        raise ValueError(f"point clouds must have equal shapes, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    if n > max_size:
        raise MemoryError(f"n = {n} exceeds the assignment size limit {max_size}")
    cost = squared_distances(X, Y)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return TransportPlanDiscrete(perm, float(cost[rows, cols].sum() / n))


def empirical_w2(X, Y, max_size: int = DEFAULT_MAX_ASSIGNMENT_SIZE) -> float:
    """W2 distance between the uniform empirical measures of two equal-size samples."""
    return math.sqrt(optimal_assignment(X, Y, max_size).cost)


def brute_force_w2(X, Y) -> float:
    """W2 by enumerating every permutation; a test oracle for ``n <= 8``."""
    X = _points(X)
    Y = _points(Y)
    n = X.shape[0]
    if X.shape != Y.shape:
        raise ValueError("point clouds must have equal shapes")
    if n > 8:
        raise ValueError("brute force is limited to n <= 8")
    cost = squared_distances(X, Y)
    rows = np.arange(n)
    best = min(cost[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def v_hat(mu_samples, nu_samples, weights) -> float:
    """``sum_k w_k * empirical_w2(mu, nu_k)^2``."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(nu_samples) != weights.shape[0]:
        raise ValueError("one weight per target sample is required")
    return float(sum(w * optimal_assignment(mu_samples, nu).cost for w, nu in zip(weights, nu_samples)))


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    floor = 1e-12 * max(np.trace(S), 0.0)
    vals = np.where(vals < floor, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _check_symmetric(S, name: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    return S


def gaussian_w2(m1, S1, m2, S2) -> float:
    """Closed-form W2 distance between two Gaussians (the Bures formula)."""
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    m2 = np.atleast_1d(np.asarray(m2, dtype=np.float64))
    S1 = _check_symmetric(S1, "S1")
    S2 = _check_symmetric(S2, "S2")
    r1 = _sym_sqrt(S1)
    cross = _sym_sqrt(r1 @ S2 @ r1)
    val = float(((m1 - m2) ** 2).sum() + np.trace(S1) + np.trace(S2) - 2 * np.trace(cross))
    return math.sqrt(max(val, 0.0))


def gaussian_barycenter_oracle(means, covariances, weights, tol: float = 1e-12, max_iter: int = 500):
    """W2 barycenter of Gaussians by the covariance fixed-point iteration.

    Returns
    -------
    mean : ndarray, shape (d,)
    cov : ndarray, shape (d, d)
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = [_check_symmetric(c, "covariance") for c in covariances]
    w = np.asarray(weights, dtype=np.float64)
    for c in covs:
        if np.linalg.eigvalsh(c)[0] <= 0:
            raise ValueError("covariances must be positive definite")
    S = sum(wk * c for wk, c in zip(w, covs))
    for _ in range(max_iter):
        root = _sym_sqrt(S)
        inv_root = np.linalg.inv(root)
        inner = sum(wk * _sym_sqrt(root @ c @ root) for wk, c in zip(w, covs))
        new = inv_root @ inner @ inner @ inv_root
        new = 0.5 * (new + new.T)
        if np.linalg.norm(new - S) <= tol:
            return w @ means, new
        S = new
    raise RuntimeError(f"Gaussian barycenter iteration did not converge in {max_iter} steps")


@dataclass(frozen=True)
class RobustSummary:
    trimmed_mean: float
    iqr: float
    q1: float
    q3: float

    def to_dict(self) -> dict:
        return {"trimmed_mean": self.trimmed_mean, "iqr": self.iqr, "q1": self.q1, "q3": self.q3}


def trimmed_mean_iqr(values, trim_frac: float = 0.10) -> RobustSummary:
    """Trimmed mean and interquartile range.

    ``floor(trim_frac * n)`` values are dropped from each end. Quartiles use
    linear interpolation between order statistics (the inclusive method,
    ``numpy.quantile(method="linear")``).
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.shape[0]
    if n < 4:
        raise ValueError("need at least 4 values")
    if not 0.0 <= trim_frac <= 0.25:
        raise ValueError("trim_frac must lie in [0, 0.25]")
    # small guard so that e.g. 0.29 * 100 is not floored to 28
    k = int(math.floor(trim_frac * n + 1e-9))
    tm = float(v[k : n - k].mean())
    q1, q3 = np.quantile(v, [0.25, 0.75], method="linear")
    return RobustSummary(tm, float(q3 - q1), float(q1), float(q3))
