"""Log-domain Sinkhorn solver for the dual entropic OT problem.

For samples ``X`` (m points) and ``Y`` (n points) with uniform weights, the
dual objective is

    D(f, g) = mean(f) + mean(g)
              - theta * mean_ij exp((f_i + g_j - c_ij) / theta)

with the halved squared-distance cost ``c_ij = 0.5 * ||X_i - Y_j||^2``. Note
the factor 1/2: W2 evaluation elsewhere uses the unhalved cost. The maximizer
satisfies the marginal identities

    (1/m) sum_i exp((f_i + g_j - c_ij) / theta) = 1   for every j,
    (1/n) sum_j exp((f_i + g_j - c_ij) / theta) = 1   for every i,

and alternating block maximization (Sinkhorn) enforces one family exactly
per half sweep. Kernels are never formed in the linear domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000
# above this many target points the Newton system is solved matrix-free by CG
NEWTON_DENSE_MAX_SIZE = 500
# switch to Newton once the observed contraction predicts more sweeps than this
NEWTON_TRIGGER_SWEEPS = 50
# sweeps between contraction-rate checks
NEWTON_WINDOW = 10


class SinkhornConvergenceError(RuntimeError):
    """Raised by callers that require convergence; carries the unconverged duals."""

    def __init__(self, message: str, duals: "SinkhornDuals"):
        super().__init__(message)
        self.duals = duals


@dataclass(frozen=True, eq=False)
class SinkhornDuals:
    """Entropic dual potentials, normalized so that ``f[0] == 0``.

    Attributes
    ----------
    f, g : ndarray
        Source and target potentials.
    theta : float
    iterations : int
        Number of full sweeps performed.
    residual : float
        Maximal marginal violation of the returned pair.
    converged : bool
        False when ``max_iter`` was hit before ``residual <= tol``.
    newton_steps : int
        Newton steps taken after the sweeps stalled (0 when not needed).
    """

    f: np.ndarray
    g: np.ndarray
    theta: float
    iterations: int
    residual: float
    converged: bool = True
    newton_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "theta": float(self.theta),
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "newton_steps": int(self.newton_steps),
        }


def _as_points(a) -> np.ndarray:
    pts = getattr(a, "points", a)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def half_cost(X, Y) -> np.ndarray:
    """Matrix of ``0.5 * ||X_i - Y_j||^2``, clipped at zero against cancellation."""
    X = _as_points(X)
    Y = _as_points(Y)
    c = 0.5 * ((X**2).sum(1)[:, None] + (Y**2).sum(1)[None, :]) - X @ Y.T
    np.maximum(c, 0.0, out=c)
    return c


class _Workspace:
    """Scaled cost and a scratch buffer reused across half sweeps."""

    def __init__(self, cost: np.ndarray, theta: float):
        self.theta = theta
        self.scaled = cost / theta
        self.buf = np.empty_like(self.scaled)
        self.log_m = np.log(cost.shape[0])
        self.log_n = np.log(cost.shape[1])

    def update_f(self, g: np.ndarray) -> np.ndarray:
        """``f_i = -theta * log((1/n) sum_j exp((g_j - c_ij)/theta))``."""
        buf = self.buf
        np.subtract((g / self.theta)[None, :], self.scaled, out=buf)
        mx = buf.max(axis=1)
        np.subtract(buf, mx[:, None], out=buf)
        np.exp(buf, out=buf)
        return -self.theta * (mx + np.log(buf.sum(axis=1)) - self.log_n)

    def update_g(self, f: np.ndarray) -> np.ndarray:
        """``g_j = -theta * log((1/m) sum_i exp((f_i - c_ij)/theta))``."""
        buf = self.buf
        np.subtract((f / self.theta)[:, None], self.scaled, out=buf)
        mx = buf.max(axis=0)
        np.subtract(buf, mx[None, :], out=buf)
        np.exp(buf, out=buf)
        return -self.theta * (mx + np.log(buf.sum(axis=0)) - self.log_m)

    def row_softmax(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``P_ij`` proportional to ``exp((g_j - c_ij)/theta)`` per row, and ``f`` exact for ``g``."""
        buf = self.buf
        np.subtract((g / self.theta)[None, :], self.scaled, out=buf)
        mx = buf.max(axis=1)
        np.subtract(buf, mx[:, None], out=buf)
        np.exp(buf, out=buf)
        tot = buf.sum(axis=1)
        buf /= tot[:, None]
        return buf, -self.theta * (mx + np.log(tot) - self.log_n)

    def residual(self, f: np.ndarray, g: np.ndarray) -> float:
        row = np.expm1((f - self.update_f(g)) / self.theta)
        col = np.expm1((g - self.update_g(f)) / self.theta)
        return float(max(np.abs(row).max(), np.abs(col).max()))


def _newton_direction(P: np.ndarray, col: np.ndarray, grad: np.ndarray, theta: float) -> np.ndarray:
    """Solve ``H d = grad`` for minus the semi-dual Hessian ``H = (diag(col) - P^T P / m) / theta``.

    ``H`` is PSD with the constant vector in its kernel; a rank-one term on
    that direction makes it definite without changing ``d`` on ``grad``'s span.
    """
    m, n = P.shape
    sq = np.einsum("ij,ij->j", P, P)
    shift = (col.sum() - sq.sum() / m) / theta / n / n
    if n <= NEWTON_DENSE_MAX_SIZE:
        H = (np.diag(col) - (P.T @ P) / m) / theta + shift
        try:
            return np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, grad, rcond=None)[0]
    diag = (col - sq / m) / theta + shift
    op = LinearOperator((n, n), matvec=lambda v: (col * v - P.T @ (P @ v) / m) / theta + shift * v.sum(), dtype=float)
    precond = LinearOperator((n, n), matvec=lambda v: v / diag, dtype=float)
    # inexact Newton: forcing term shrinks with the gradient
    rtol = min(0.1, float(np.sqrt(n * np.abs(grad).max())))
    d, _ = cg(op, grad, rtol=rtol, M=precond, maxiter=10 * int(np.sqrt(n)) + 50)
    return d


def _newton_semidual(ws: _Workspace, g: np.ndarray, tol: float, max_steps: int = 100):
    """Maximize the semi-dual ``F(g) = mean f(g) + mean g`` by damped Newton.

    With ``f = f(g)`` the row identities hold exactly and the column
    violation is ``n * |grad F|``, so iterating to ``n * max|grad| <= tol``
    certifies the pair.

    Returns
    -------
    f, g, steps
    """
    m, n = ws.scaled.shape

    def value(gv):
        _, fv = ws.row_softmax(gv)
        return fv.mean() + gv.mean()

    steps = 0
    for steps in range(1, max_steps + 1):
        P, f = ws.row_softmax(g)
        col = P.mean(axis=0)
        grad = 1.0 / n - col
        if n * np.abs(grad).max() <= 0.1 * tol:
            return f, g, steps - 1
        # the line search below overwrites the softmax buffer
        d = _newton_direction(P.copy() if n > NEWTON_DENSE_MAX_SIZE else P, col, grad, ws.theta)
        slope = float(grad @ d)
        if not slope > 0:
            d, slope = grad, float(grad @ grad)
        f0 = f.mean() + g.mean()
        # Armijo with slack for rounding in the objective, which dominates near the optimum
        slack = 64 * np.finfo(float).eps * (abs(f0) + 1.0)
        t = 1.0
        for _ in range(50):
            if value(g + t * d) >= f0 + 1e-4 * t * slope - slack or t < 1e-12:
                break
            t *= 0.5
        g = g + t * d
    _, f = ws.row_softmax(g)
    return f, g, steps


def sinkhorn_solve(
    X,
    Y,
    theta: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    callback=None,
    newton: bool = True,
) -> SinkhornDuals:
    """Solve the entropic dual between the empirical measures of ``X`` and ``Y``.

    Parameters
    ----------
    X : array_like or SampleBatch, shape (m, d)
    Y : array_like or SampleBatch, shape (n, d)
    theta : float
        Entropic regularization, positive.
    tol : float
        Stop once the maximal marginal violation is at most ``tol``.
    max_iter : int
        Cap on full sweeps. Hitting it returns duals with ``converged=False``.
    callback : callable, optional
        Called as ``callback(sweep, f, g)`` after every full sweep, before
        normalization.
    newton : bool
        When the sweeps contract so slowly that more than
        ``NEWTON_TRIGGER_SWEEPS`` further sweeps are predicted (typical for
        small ``theta`` or large samples), finish with damped Newton steps on
        the semi-dual in ``g``. The Newton system is solved densely for small
        ``n`` and by preconditioned conjugate gradients otherwise.

    Returns
    -------
    SinkhornDuals

    Notes
    -----
    After each sweep ``g`` is exact for the column constraints of ``(f, g)``.
    The next row update ``f_new`` then certifies the row residual of the pair
    as ``max_i |exp((f_i - f_new_i)/theta) - 1|`` at no extra cost, so the
    returned pair is the last one whose residual was measured.
    """
    X = _as_points(X)
    Y = _as_points(Y)
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise ValueError("both samples need at least one point")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if not (np.isfinite(theta) and theta > 0):
        raise ValueError(f"theta must be positive and finite, got {theta!r}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite sample points give non-finite cost entries")
    cost = half_cost(X, Y)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    ws = _Workspace(cost, theta)

    f = np.zeros(X.shape[0])
    g = ws.update_g(f)
    sweeps = 0
    converged = False
    residual = np.inf
    newton_steps = 0
    history = []
    while True:
        f_new = ws.update_f(g)
        residual = float(np.max(np.abs(np.expm1((f - f_new) / theta))))
        if residual <= tol:
            converged = True
            break
        if sweeps >= max_iter:
            break
        history.append(residual)
        if newton and _stalled(history, tol, max_iter - sweeps):
            f_n, g_n, newton_steps = _newton_semidual(ws, g, tol)
            res_n = ws.residual(f_n, g_n)
            if res_n < residual:
                f, g, residual = f_n, g_n, res_n
                converged = residual <= tol
                break
            newton = False
        f = f_new
        g = ws.update_g(f)
        sweeps += 1
        if callback is not None:
            callback(sweeps, f, g)
    shift = f[0]
    return SinkhornDuals(f - shift, g + shift, float(theta), sweeps, residual, converged, newton_steps)


def _stalled(history: list, tol: float, remaining: int, window: int = NEWTON_WINDOW) -> bool:
    """Whether the recent contraction rate predicts too many further sweeps."""
    if len(history) < 2 * window or len(history) % window:
        return False
    prev, last = history[-window - 1], history[-1]
    if not (last > 0 and prev > 0):
        return False
    rate = (last / prev) ** (1.0 / window)
    if rate >= 1.0:
        return True
    needed = np.log(tol / last) / np.log(rate)
    return needed > min(NEWTON_TRIGGER_SWEEPS, remaining)


def marginal_residual(duals: SinkhornDuals, X, Y) -> float:
    """Maximal violation of the row and column marginal identities."""
    X = _as_points(X)
    Y = _as_points(Y)
    f = np.asarray(duals.f, dtype=np.float64)
    g = np.asarray(duals.g, dtype=np.float64)
    if f.shape != (X.shape[0],) or g.shape != (Y.shape[0],) or X.shape[1] != Y.shape[1]:
        raise ValueError("duals and samples have inconsistent shapes")
    ws = _Workspace(half_cost(X, Y), float(duals.theta))
    row = np.expm1((f - ws.update_f(g)) / duals.theta)
    col = np.expm1((g - ws.update_g(f)) / duals.theta)
    return float(max(np.abs(row).max(), np.abs(col).max()))


def dual_objective(f, g, X, Y, theta: float) -> float:
    """Value of the entropic dual objective at ``(f, g)``."""
    X = _as_points(X)
    Y = _as_points(Y)
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    z = (f[:, None] + g[None, :] - half_cost(X, Y)) / theta
    mx = z.max()
    return float(f.mean() + g.mean() - theta * np.exp(mx) * np.exp(z - mx).mean())
