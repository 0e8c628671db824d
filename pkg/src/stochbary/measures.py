"""Samplable probability measures on R^d.

Measures expose ``dim`` and ``sample_points(n, rng)``; the public
:func:`sample` wraps draws into a :class:`SampleBatch` that remembers the stream
it came from.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .rng import Stream, as_stream

# relative eigenvalue floor below which a covariance is treated as singular
COV_RCOND = 1e-12


@runtime_checkable
class Measure(Protocol):
    dim: int

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


def _check_cov(cov, d: int) -> np.ndarray:
    cov = np.array(cov, dtype=np.float64, copy=True)
    if cov.shape != (d, d):
        raise ValueError(f"covariance must have shape {(d, d)}, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance has non-finite entries")
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
        raise ValueError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 0 or eig[0] < COV_RCOND * eig[-1]:
        raise ValueError(f"covariance is singular or not positive definite (eigenvalues {eig})")
    return cov


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite mixture of nondegenerate Gaussians.

    Parameters
    ----------
    weights : array_like, shape (p,)
        Positive mixture weights summing to one.
    means : array_like, shape (p, d)
    covariances : array_like, shape (p, d, d)
        Symmetric positive-definite matrices.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        p, d = m.shape
        covs = np.asarray(self.covariances, dtype=np.float64).reshape(p, d, d)
        if w.shape != (p,):
            raise ValueError("weights and means disagree on the component count")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and finite")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if not np.all(np.isfinite(m)):
            raise ValueError("means have non-finite entries")
        covs = np.stack([_check_cov(c, d) for c in covs])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "_chol", np.linalg.cholesky(covs))
        for arr in (w, m, covs, self._chol):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], z)

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.dim
        out = np.empty((x.shape[0], self.n_components))
        for c in range(self.n_components):
            diff = x - self.means[c]
            sol = np.linalg.solve(self._chol[c], diff.T)
            logdet = 2.0 * np.log(np.diag(self._chol[c])).sum()
            out[:, c] = (
                np.log(self.weights[c])
                - 0.5 * (sol**2).sum(axis=0)
                - 0.5 * logdet
                - 0.5 * d * np.log(2 * np.pi)
            )
        return logsumexp(out, axis=1)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def second_moment(self) -> float:
        """E||X||^2."""
        tr = np.trace(self.covariances, axis1=1, axis2=2)
        return float(self.weights @ (tr + (self.means**2).sum(axis=1)))

    def to_dict(self) -> dict:
        return {
            "type": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


def Gaussian(mean, cov) -> GaussianMixture:
    """Single Gaussian as a one-component mixture."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMixture([1.0], mean[None, :], np.asarray(cov, dtype=np.float64)[None])


def standard_gaussian(d: int) -> GaussianMixture:
    return Gaussian(np.zeros(d), np.eye(d))


@dataclass(frozen=True, eq=False)
class TruncatedMeasure:
    """A measure conditioned on the closed ball ``B(0, radius)``, sampled by rejection.

    Parameters
    ----------
    base : Measure
    radius : float
    max_attempts_factor : float
        Give up after this many times ``n / acceptance`` proposals, with the
        acceptance estimate floored at 1e-3.
    """

    base: Measure
    radius: float
    max_attempts_factor: float = 50.0

    @property
    def dim(self) -> int:
        return self.base.dim

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pts, _ = rejection_draw(
            lambda m: self.base.sample_points(m, rng), n, self.radius, self.max_attempts_factor
        )
        return pts

    def to_dict(self) -> dict:
        return {"type": "truncated", "radius": float(self.radius), "base": measure_to_dict(self.base)}


class RejectionBudgetError(RuntimeError):
    """Raised when rejection sampling exhausts its proposal budget."""


def rejection_draw(propose, n: int, radius: float, max_attempts_factor: float = 50.0):
    """Draw proposals in blocks until ``n`` of them land in ``B(0, radius)``.

    Parameters
    ----------
    propose : callable
        ``propose(m)`` returns an ``(m, d)`` array of fresh proposals.
    n : int
    radius : float
    max_attempts_factor : float

    Returns
    -------
    points : ndarray, shape (n, d)
        The first ``n`` accepted proposals in draw order.
    acceptance : float
        Accepted over proposed, counting every proposal drawn.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return propose(0), 1.0
    accepted = []
    n_acc = 0
    n_prop = 0
    block = max(n, 16)
    while n_acc < n:
        rate = max(n_acc / n_prop if n_prop else 1.0, 1e-3)
        if n_prop > max_attempts_factor * max(n, 1) / rate:
            raise RejectionBudgetError(
                f"rejection sampling gave up after {n_prop} proposals with {n_acc} accepted; "
                f"radius {radius!r} is too small"
            )
        pts = propose(block)
        if not np.all(np.isfinite(pts)):
            raise FloatingPointError("proposal produced non-finite points")
        inside = np.linalg.norm(pts, axis=1) <= radius
        n_prop += block
        accepted.append(pts[inside])
        n_acc += int(inside.sum())
        # size the next block from the observed acceptance rate
        block = int(np.ceil(1.1 * (n - n_acc) / max(n_acc / n_prop, 1e-3))) + 16
    out = np.concatenate(accepted)[:n]
    return out, (n_acc / n_prop if n_prop else 1.0)


@dataclass(frozen=True)
class BallFamily:
    """Nested closed balls ``B(center, r)`` over an increasing radius grid."""

    radii: tuple[float, ...]
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        r = tuple(float(v) for v in self.radii)
        if not r or r[0] <= 0 or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("radii must be positive and strictly increasing")
        object.__setattr__(self, "radii", r)

    @classmethod
    def geometric(cls, r_min: float = 1.0, ratio: float = 1.25, r_max: float = 1e6) -> "BallFamily":
        count = int(np.floor(np.log(r_max / r_min) / np.log(ratio))) + 1
        return cls(tuple(r_min * ratio**i for i in range(count)))

    def contains(self, x, r: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.zeros(x.shape[1]) if self.center is None else np.asarray(self.center)
        return np.linalg.norm(x - c, axis=1) <= r


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Points with a record of the stream that produced them."""

    points: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.shape[0] < 1:
            raise ValueError("a SampleBatch needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("SampleBatch contains non-finite points")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path=None) -> str:
        text = points_to_csv(self.points)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, provenance: dict | None = None) -> "SampleBatch":
        return cls(points_from_csv(Path(path).read_text()), provenance or {})


def points_to_csv(points: np.ndarray) -> str:
    points = np.atleast_2d(points)
    buf = io.StringIO()
    buf.write(",".join(f"x{i}" for i in range(points.shape[1])) + "\n")
    for row in points:
        buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    return buf.getvalue()


def points_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header != [f"x{i}" for i in range(len(header))]:
        raise ValueError(f"unexpected SampleBatch header {header}")
    return np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(-1, len(header))


def sample(measure: Measure, n: int, stream: Stream | int) -> SampleBatch:
    """Draw ``n`` i.i.d. points from ``measure`` using ``stream``.

    The same ``(measure, n, stream)`` always yields bit-identical points.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    stream = as_stream(stream)
    pts = measure.sample_points(int(n), stream.generator())
    return SampleBatch(pts, {**stream.provenance(), "draw": 0, "n": int(n)})


def gm_log_density(gm: GaussianMixture, x) -> np.ndarray:
    return gm.log_density(x)


def gm_density(gm: GaussianMixture, x):
    """Mixture density at ``x`` (a single point or an ``(n, d)`` array)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    if x.ndim == 0:
        x = x[None]
    vals = np.exp(gm.log_density(x.reshape(-1, gm.dim)))
    return float(vals[0]) if single else vals


def measure_to_dict(measure: Measure) -> dict:
    if hasattr(measure, "to_dict"):
        return measure.to_dict()
    raise TypeError(f"cannot serialize measure of type {type(measure).__name__}")


def measure_from_dict(spec: dict) -> Measure:
    """Build a measure from its JSON description.

    Recognized ``type`` values: ``gaussian`` (``mean``, ``cov``),
    ``gaussian_mixture`` (``weights``, ``means``, ``covariances``) and
    ``truncated`` (``base``, ``radius``).
    """
    kind = spec.get("type")
    if kind == "gaussian":
        return Gaussian(spec["mean"], spec["cov"])
    if kind == "gaussian_mixture":
        return GaussianMixture(spec["weights"], spec["means"], spec["covariances"])
    if kind == "truncated":
        return TruncatedMeasure(measure_from_dict(spec["base"]), float(spec["radius"]))
    raise ValueError(f"unknown measure type {kind!r}")
