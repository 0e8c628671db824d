"""Entropic OT map estimator with a radial strong-convexity correction.

Given Sinkhorn target potentials ``g`` on samples ``Y``, the estimated
potential is

    phi(x) = theta * log sum_j exp((g_j + <Y_j, x> - |Y_j|^2 / 2) / theta)
             + int_0^{|x|^2/2} gamma(z) dz,

and the estimated map is its gradient: the softmax-weighted average of the
targets (barycentric projection) plus ``gamma(|x|^2/2) * x``. The correction
``gamma`` vanishes on the source support ball of radius ``r0_mu`` and tends
to one far away, which makes the potential strongly convex on all of R^d.

The additive constant ``-theta * log n`` of the empirical mean inside the
logarithm is omitted; it does not affect the map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import exp1, logsumexp, softmax

from .sinkhorn import DEFAULT_MAX_ITER, DEFAULT_TOL, SinkhornConvergenceError, SinkhornDuals, sinkhorn_solve

# rows per block when evaluating on many points; keeps the logit matrix small
_BLOCK_ENTRIES = 4_000_000
# radius inflation for sample-based support radii
RADIUS_SAFETY = 1.05


def gamma_correction(z, r0_mu: float):
    """``exp(-2 / (2z - r0_mu^2))`` for ``z > r0_mu^2 / 2``, zero otherwise."""
    z = np.asarray(z, dtype=np.float64)
    gap = 2.0 * z - r0_mu**2
    with np.errstate(divide="ignore", over="ignore"):
        out = np.where(gap > 0, np.exp(-2.0 / np.where(gap > 0, gap, 1.0)), 0.0)
    return out if out.ndim else float(out)


def gamma_derivative(z, r0_mu: float):
    """Derivative of :func:`gamma_correction` in ``z``."""
    z = np.asarray(z, dtype=np.float64)
    gap = 2.0 * z - r0_mu**2
    safe = np.where(gap > 0, gap, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = np.where(gap > 0, np.exp(-2.0 / safe) * 4.0 / safe**2, 0.0)
    return out if out.ndim else float(out)


def gamma_integral(s, r0_mu: float):
    """``int_0^s gamma(z) dz`` in closed form.

    With ``a = s - r0_mu^2/2 > 0`` the integral equals
    ``a * exp(-1/a) - E1(1/a)``, where ``E1`` is the exponential integral.
    """
    s = np.asarray(s, dtype=np.float64)
    a = s - 0.5 * r0_mu**2
    safe = np.where(a > 0, a, 1.0)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        val = safe * np.exp(-1.0 / safe) - exp1(1.0 / safe)
    out = np.where(a > 0, val, 0.0)
    return out if out.ndim else float(out)


def theta_schedule(m: int, n: int, alpha_bar: float = 3.0, d: int = 2) -> float:
    """Regularization ``min(m, n) ** (-1 / (alpha_bar + d))``."""
    if m < 1 or n < 1:
        raise ValueError("sample sizes must be positive")
    if not 3.0 <= alpha_bar <= 4.0:
        raise ValueError(f"alpha_bar must lie in [3, 4], got {alpha_bar!r}")
    if d < 1:
        raise ValueError("dimension must be positive")
    return float(min(m, n) ** (-1.0 / (alpha_bar + d)))


class LogSumExpPotential:
    """``theta * log sum_j exp((g_j + <Y_j, x> - |Y_j|^2/2) / theta)`` and its derivatives.

    The gradient is the softmax-weighted average of the targets and the
    Hessian is the softmax covariance of the targets divided by ``theta``.
    """

    def __init__(self, targets: np.ndarray, g: np.ndarray, theta: float):
        self.targets = targets
        self.theta = float(theta)
        self.offset = g - 0.5 * np.einsum("ij,ij->i", targets, targets)

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    def _logits(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.targets.T + self.offset[None, :]) / self.theta

    def _blocks(self, x: np.ndarray):
        step = max(1, _BLOCK_ENTRIES // self.n)
        for start in range(0, x.shape[0], step):
            yield slice(start, start + step)

    def value(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        for sl in self._blocks(x):
            out[sl] = self.theta * logsumexp(self._logits(x[sl]), axis=1)
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for sl in self._blocks(x):
            out[sl] = softmax(self._logits(x[sl]), axis=1) @ self.targets
        return out

    def hessian(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[1]
        out = np.empty((x.shape[0], d, d))
        for sl in self._blocks(x):
            p = softmax(self._logits(x[sl]), axis=1)
            mean = p @ self.targets
            second = np.einsum("nj,ja,jb->nab", p, self.targets, self.targets)
            out[sl] = (second - mean[:, :, None] * mean[:, None, :]) / self.theta
        return out


@dataclass(frozen=True)
class ConvexityBound:
    """Certified strong-convexity constant and its logarithm.

    ``value`` may underflow to zero while ``log_value`` stays finite;
    ``degenerate`` is set whenever ``value`` is zero.
    """

    value: float
    log_value: float
    degenerate: bool


def _convexity_bound(Y: np.ndarray, theta: float, r0_mu: float, r0_nu: float) -> ConvexityBound:
    cov = np.cov(Y, rowvar=False, bias=True).reshape(Y.shape[1], Y.shape[1])
    eig = np.linalg.eigvalsh(cov)
    e_min = eig[0] if eig[0] > 1e-12 * max(eig[-1], 1e-300) else 0.0
    with np.errstate(divide="ignore"):
        log_cov_term = -np.log(theta) - (6 * r0_mu + 4 * r0_nu) * r0_nu / theta + np.log(e_min)
        log_gamma_term = -2.0 / (3.0 * r0_mu**2) if r0_mu > 0 else -np.inf
    log_value = float(min(log_cov_term, log_gamma_term))
    value = float(np.exp(log_value))
    return ConvexityBound(value, log_value, value == 0.0)


@dataclass(frozen=True, eq=False)
class EntropicMap:
    """Gradient of the corrected entropic potential.

    Attributes
    ----------
    targets : ndarray, shape (n, d)
    g : ndarray, shape (n,)
        Target potentials from the Sinkhorn solve.
    theta : float
    r0_mu, r0_nu : float
        Radii of balls containing the source and target supports.
    lambda_lb : float
        Certified strong-convexity constant of the potential (may be 0 when
        it underflows, see ``log_lambda_lb`` and ``degenerate``).
    """

    targets: np.ndarray
    g: np.ndarray
    theta: float
    r0_mu: float
    r0_nu: float
    lambda_lb: float = field(default=np.nan)
    log_lambda_lb: float = field(default=np.nan)
    degenerate: bool = False
    solver: dict = field(default_factory=dict)
    _lse: LogSumExpPotential = field(init=False, repr=False)

    def __post_init__(self):
        Y = np.array(self.targets, dtype=np.float64, ndmin=2)
        g = np.array(self.g, dtype=np.float64).reshape(-1)
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise ValueError(f"theta must be positive and finite, got {self.theta!r}")
        if g.shape[0] != Y.shape[0]:
            raise ValueError("g and targets disagree on n")
        if Y.shape[0] < Y.shape[1] + 1:
            raise ValueError(f"need at least d+1 = {Y.shape[1] + 1} targets, got {Y.shape[0]}")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(g))):
            raise ValueError("targets and potentials must be finite")
        Y.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "targets", Y)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "_lse", LogSumExpPotential(Y, g, self.theta))
        if np.isnan(self.lambda_lb):
            b = _convexity_bound(Y, self.theta, self.r0_mu, self.r0_nu)
            object.__setattr__(self, "lambda_lb", b.value)
            object.__setattr__(self, "log_lambda_lb", b.log_value)
            object.__setattr__(self, "degenerate", b.degenerate)

    @property
    def dim(self) -> int:
        return self.targets.shape[1]

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    def projection(self, x) -> np.ndarray:
        """Softmax-weighted average of the targets (the barycentric projection)."""
        x, single = _points(x, self.dim)
        out = self._lse.gradient(x)
        return out[0] if single else out

    def __call__(self, x) -> np.ndarray:
        x, single = _points(x, self.dim)
        out = self._lse.gradient(x)
        out += gamma_correction(0.5 * np.einsum("ij,ij->i", x, x), self.r0_mu)[:, None] * x
        return out[0] if single else out

    def potential(self, x):
        x, single = _points(x, self.dim)
        out = self._lse.value(x) + gamma_integral(0.5 * np.einsum("ij,ij->i", x, x), self.r0_mu)
        return float(out[0]) if single else out

    def hessian(self, x) -> np.ndarray:
        """Analytic Hessian of the potential, shape ``(N, d, d)`` (or ``(d, d)``)."""
        x, single = _points(x, self.dim)
        out = self._lse.hessian(x)
        s = 0.5 * np.einsum("ij,ij->i", x, x)
        out += gamma_correction(s, self.r0_mu)[:, None, None] * np.eye(self.dim)
        out += gamma_derivative(s, self.r0_mu)[:, None, None] * x[:, :, None] * x[:, None, :]
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "targets": self.targets.tolist(),
            "g": self.g.tolist(),
            "theta": float(self.theta),
            "r0_mu": float(self.r0_mu),
            "r0_nu": float(self.r0_nu),
            "lambda_lb": float(self.lambda_lb),
            "log_lambda_lb": float(self.log_lambda_lb),
            "degenerate": bool(self.degenerate),
            "solver": dict(self.solver),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntropicMap":
        return cls(
            np.array(d["targets"], dtype=np.float64),
            np.array(d["g"], dtype=np.float64),
            float(d["theta"]),
            float(d["r0_mu"]),
            float(d["r0_nu"]),
            float(d["lambda_lb"]),
            float(d["log_lambda_lb"]),
            bool(d["degenerate"]),
            dict(d.get("solver", {})),
        )


def _points(x, d: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


def map_eval(emap: EntropicMap, x) -> np.ndarray:
    """Evaluate the estimated map at one point or a batch of points."""
    return emap(x)


def potential_eval(emap: EntropicMap, x):
    """Evaluate the estimated potential at one point or a batch of points."""
    return emap.potential(x)


def strong_convexity_bound(emap: EntropicMap) -> ConvexityBound:
    """Certified lower bound on the Hessian of the potential, recomputed from the fields."""
    return _convexity_bound(emap.targets, emap.theta, emap.r0_mu, emap.r0_nu)


def support_radius(points) -> float:
    """Sample-based support radius: largest norm times the safety factor."""
    pts = np.atleast_2d(getattr(points, "points", points))
    return float(RADIUS_SAFETY * np.linalg.norm(pts, axis=1).max())


def build_entropic_map(
    X,
    Y,
    theta: float,
    r0_mu: float | None = None,
    r0_nu: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    require_convergence: bool = True,
) -> EntropicMap:
    """Fit the corrected entropic map from source samples ``X`` to target samples ``Y``.

    Parameters
    ----------
    X, Y : array_like or SampleBatch
        Source (m, d) and target (n, d) samples; ``n >= d + 1``.
    theta : float
    r0_mu, r0_nu : float, optional
        Support radii. When given they must cover the samples; when omitted
        they default to :func:`support_radius` of the samples.
    tol, max_iter : Sinkhorn stopping rule.
    require_convergence : bool
        Raise :class:`SinkhornConvergenceError` if the solve hits ``max_iter``.
    """
    X = np.atleast_2d(np.asarray(getattr(X, "points", X), dtype=np.float64))
    Y = np.atleast_2d(np.asarray(getattr(Y, "points", Y), dtype=np.float64))
    d = Y.shape[1]
    if Y.shape[0] < d + 1:
        raise ValueError(f"need n >= d+1 = {d + 1} target samples, got {Y.shape[0]}")
    if X.shape[0] < 1:
        raise ValueError("need at least one source sample")
    x_max = float(np.linalg.norm(X, axis=1).max())
    y_max = float(np.linalg.norm(Y, axis=1).max())
    r0_mu = support_radius(X) if r0_mu is None else float(r0_mu)
    r0_nu = support_radius(Y) if r0_nu is None else float(r0_nu)
    if x_max > r0_mu:
        raise ValueError(f"source sample of norm {x_max!r} lies outside r0_mu = {r0_mu!r}")
    if y_max > r0_nu:
        raise ValueError(f"target sample of norm {y_max!r} lies outside r0_nu = {r0_nu!r}")
    duals: SinkhornDuals = sinkhorn_solve(X, Y, theta, tol=tol, max_iter=max_iter)
    if require_convergence and not duals.converged:
        raise SinkhornConvergenceError(
            f"Sinkhorn stopped after {duals.iterations} sweeps with residual {duals.residual:.3e}", duals
        )
    return EntropicMap(Y, duals.g, float(theta), r0_mu, r0_nu, solver=duals.to_dict())
