"""Synthetic barycenter instances with a known (approximate) barycenter.

Auxiliary maps come from entropic OT between the reference measure ``mu_bar``
and auxiliary measures ``kappa_i``:

    T+_i(x) = softmax projection_i(x) + lambda_lb_i * x,
    T-_i(x) = lambda_ub_i * x - T+_i(x).

With ``lambda_ub_i`` at least the smoothness of ``T+_i`` plus ``lambda_lb_i``, both are
gradients of strongly convex potentials. An assignment ``Phi`` sends every
signed auxiliary index to an input index ``k``, and

    T_k(x) = sum_{i in Phi^-1(k)} beta_i T_i(x) + gamma (A_k x + b_k).

The multipliers ``beta`` are chosen so that ``sum_k w_k T_k(x) = x`` for all
``x``. Hence ``mu_bar`` is the barycenter of the pushforwards ``T_k # mu_bar``,
exactly when they are not truncated and approximately otherwise (see
:func:`epsilon_diagnostics`).

Auxiliary indices are zero-based here: ``phi_positive[i]`` is the input
receiving ``T+_i`` and ``phi_negative[i]`` the one receiving ``T-_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .entropic_map import LogSumExpPotential
from .evaluation import optimal_assignment
from .measures import (
    GaussianMixture,
    Measure,
    SampleBatch,
    measure_from_dict,
    measure_to_dict,
    rejection_draw,
)
from .rng import Purpose, Stream, as_stream
from .sinkhorn import sinkhorn_solve

# tolerance for the affine identities sum w_k A_k = I and sum w_k b_k = 0
AFFINE_TOL = 1e-10


class InstanceConfigError(ValueError):
    """An input violates the conditions required of an instance."""


class InversionError(RuntimeError):
    def __init__(self, message: str, residual: np.ndarray):
        super().__init__(message)
        self.residual = residual


def smoothness_bound(targets, theta: float, lambda_lb: float) -> float:
    """``max_j |y_j|^2 / theta + 2 * lambda_lb``.

    The softmax covariance of the targets never exceeds ``max_j |y_j|^2``, so
    this dominates the largest Hessian eigenvalue of ``T+`` plus ``lambda_lb``.
    """
    if not lambda_lb > 0:
        raise InstanceConfigError(f"lambda_lb must be positive, got {lambda_lb!r}")
    if not theta > 0:
        raise InstanceConfigError("theta must be positive")
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if Y.shape[0] < 1:
        raise InstanceConfigError("targets must be nonempty")
    return float(np.einsum("ij,ij->i", Y, Y).max() / theta + 2.0 * lambda_lb)


@dataclass(frozen=True, eq=False)
class AuxiliaryMap:
    """A pair ``T+ = grad(phi+)`` and ``T- = grad(phi-)`` built from entropic duals."""

    index: int
    targets: np.ndarray
    g: np.ndarray
    theta: float
    lambda_lb: float
    lambda_ub: float
    _lse: LogSumExpPotential = field(init=False, repr=False)

    def __post_init__(self):
        Y = np.array(self.targets, dtype=np.float64, ndmin=2)
        g = np.array(self.g, dtype=np.float64).reshape(-1)
        if g.shape[0] != Y.shape[0]:
            raise InstanceConfigError("g and targets disagree on n")
        if Y.shape[0] < Y.shape[1] + 1:
            raise InstanceConfigError(f"auxiliary map needs at least d+1 = {Y.shape[1] + 1} targets")
        required = smoothness_bound(Y, self.theta, self.lambda_lb)
        if self.lambda_ub < required * (1 - 1e-12):
            raise InstanceConfigError(
                f"lambda_ub = {self.lambda_ub!r} is below the smoothness bound {required!r} (auxiliary {self.index})"
            )
        Y.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "targets", Y)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "_lse", LogSumExpPotential(Y, g, self.theta))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._lse.gradient(x) + self.lambda_lb * x

    def backward(self, x: np.ndarray) -> np.ndarray:
        return self.lambda_ub * x - self.forward(x)

    def forward_potential(self, x: np.ndarray) -> np.ndarray:
        return self._lse.value(x) + 0.5 * self.lambda_lb * np.einsum("ij,ij->i", x, x)

    def backward_potential(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * self.lambda_ub * np.einsum("ij,ij->i", x, x) - self.forward_potential(x)

    def forward_hessian(self, x: np.ndarray) -> np.ndarray:
        return self._lse.hessian(x) + self.lambda_lb * np.eye(x.shape[1])

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "targets": self.targets.tolist(),
            "g": self.g.tolist(),
            "theta": float(self.theta),
            "lambda_lb": float(self.lambda_lb),
            "lambda_ub": float(self.lambda_ub),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuxiliaryMap":
        return cls(int(d["index"]), d["targets"], d["g"], float(d["theta"]), float(d["lambda_lb"]), float(d["lambda_ub"]))


def build_auxiliary_maps(
    mu_bar: Measure,
    auxiliaries,
    n_per: int,
    thetas,
    lambdas_lb,
    stream: Stream | int,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> list[AuxiliaryMap]:
    """Entropic duals between ``mu_bar`` and each auxiliary measure.

    For auxiliary ``i``, ``n_per`` points are drawn from ``mu_bar`` and from
    ``kappa_i``. The Sinkhorn target potentials and the ``kappa_i`` samples define
    ``T+_i``.
    """
    stream = as_stream(stream)
    auxiliaries = list(auxiliaries)
    n_aux = len(auxiliaries)
    if n_aux < 2:
        raise InstanceConfigError("at least two auxiliary measures are required")
    d = mu_bar.dim
    if n_per < d + 1:
        raise InstanceConfigError(f"n_per must be at least d+1 = {d + 1}")
    thetas = np.broadcast_to(np.asarray(thetas, dtype=np.float64), (n_aux,))
    lambdas_lb = np.broadcast_to(np.asarray(lambdas_lb, dtype=np.float64), (n_aux,))
    out = []
    for i, kappa in enumerate(auxiliaries):
        X = mu_bar.sample_points(n_per, stream.child(Purpose.INSTANCE, 0, i).generator())
        Y = kappa.sample_points(n_per, stream.child(Purpose.INSTANCE, 1, i).generator())
        duals = sinkhorn_solve(X, Y, float(thetas[i]), tol=tol, max_iter=max_iter)
        if not duals.converged:
            raise RuntimeError(f"Sinkhorn did not converge for auxiliary {i} (residual {duals.residual:.3e})")
        lam = float(lambdas_lb[i])
        out.append(AuxiliaryMap(i, Y, duals.g, float(thetas[i]), lam, smoothness_bound(Y, thetas[i], lam)))
    return out


def default_phi(K: int, K_tilde: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced surjective assignment cycling over ``T+_0..T+_{K~-1}, T-_0..T-_{K~-1}``.

    If the plain cycle would send ``T+_i`` and ``T-_i`` to the same input (which
    collapses that input's map towards a multiple of the identity), the
    negative half is rotated by one instead.
    """
    if K_tilde < 2 or K < 2 or 2 * K_tilde < K:
        raise InstanceConfigError("need K >= 2, K_tilde >= 2 and 2 * K_tilde >= K")
    pos = np.arange(K_tilde) % K
    neg = (K_tilde + np.arange(K_tilde)) % K
    if np.any(pos == neg):
        neg = (np.arange(K_tilde) + 1) % K
    return pos.astype(np.int64), neg.astype(np.int64)


def multipliers(weights, phi_positive, phi_negative, alphas, lambda_ubs, gamma: float):
    """Multipliers ``beta`` making the weighted sum of the maps the identity.

    ``beta-_i = (1 - gamma) alpha_i / sum_j w_{Phi(-j)} alpha_j lambda_ub_j`` and
    ``beta+_i = (w_{Phi(-i)} / w_{Phi(+i)}) beta-_i``.

    Returns
    -------
    beta_positive, beta_negative : ndarray
    """
    w = np.asarray(weights, dtype=np.float64)
    pos = np.asarray(phi_positive, dtype=np.int64)
    neg = np.asarray(phi_negative, dtype=np.int64)
    alphas = np.asarray(alphas, dtype=np.float64)
    lam = np.asarray(lambda_ubs, dtype=np.float64)
    K = w.shape[0]
    if set(pos.tolist()) | set(neg.tolist()) != set(range(K)):
        raise InstanceConfigError("Phi is not surjective onto the input indices")
    if pos.min() < 0 or neg.min() < 0 or max(pos.max(), neg.max()) >= K:
        raise InstanceConfigError("Phi maps outside the input indices")
    if np.any(alphas <= 0) or np.any(lam <= 0):
        raise InstanceConfigError("alphas and lambda_ub must be positive")
    if not 0.0 <= gamma < 1.0:
        raise InstanceConfigError("gamma must lie in [0, 1)")
    if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
        raise InstanceConfigError("weights must be positive and sum to 1")
    norm = float(np.sum(w[neg] * alphas * lam))
    beta_neg = (1.0 - gamma) * alphas / norm
    beta_pos = w[neg] / w[pos] * beta_neg
    return beta_pos, beta_neg


def random_spd_affine(weights, d: int, spread: float, shift: float, rng: np.random.Generator):
    """Random ``(A_k, b_k)`` with ``sum w_k A_k = I``, each ``A_k`` positive definite, ``sum w_k b_k = 0``.

    The first ``K - 1`` pairs are drawn freely; the last one is solved for.
    ``spread`` is halved until the solved matrix is positive definite.
    """
    w = np.asarray(weights, dtype=np.float64)
    K = w.shape[0]
    raw = rng.standard_normal((K - 1, d, d))
    sym = 0.5 * (raw + raw.transpose(0, 2, 1))
    sym /= np.maximum(np.abs(np.linalg.eigvalsh(sym)).max(axis=1), 1e-12)[:, None, None]
    b_free = shift * rng.standard_normal((K - 1, d))
    eye = np.eye(d)
    while True:
        A = np.empty((K, d, d))
        A[:-1] = eye + spread * sym
        A[-1] = (eye - np.einsum("k,kij->ij", w[:-1], A[:-1])) / w[-1]
        A[-1] = 0.5 * (A[-1] + A[-1].T)
        if np.linalg.eigvalsh(A).min() > 1e-3:
            break
        spread *= 0.5
    b = np.empty((K, d))
    b[:-1] = b_free
    b[-1] = -(w[:-1] @ b_free) / w[-1]
    return A, b


@dataclass(frozen=True, eq=False)
class Instance:
    """Everything needed to evaluate ``T_k``, ``phi_k`` and sample the inputs ``nu_k``."""

    mu_bar: GaussianMixture
    weights: np.ndarray
    aux: tuple
    alphas: np.ndarray
    phi_positive: np.ndarray
    phi_negative: np.ndarray
    A: np.ndarray
    b: np.ndarray
    gamma: float
    truncate: bool = True
    radii: np.ndarray | None = None
    beta_positive: np.ndarray = field(default=None)
    beta_negative: np.ndarray = field(default=None)
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        K = w.shape[0]
        d = self.mu_bar.dim
        aux = tuple(self.aux)
        if K < 2:
            raise InstanceConfigError("need K >= 2 input measures")
        if len(aux) < 2:
            raise InstanceConfigError("need at least two auxiliary maps")
        if 2 * len(aux) < K:
            raise InstanceConfigError("need 2 * K_tilde >= K")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise InstanceConfigError("weights must be positive and sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise InstanceConfigError("gamma must lie in [0, 1)")
        A = np.asarray(self.A, dtype=np.float64).reshape(K, d, d)
        b = np.asarray(self.b, dtype=np.float64).reshape(K, d)
        if not np.allclose(A, A.transpose(0, 2, 1), atol=1e-12):
            raise InstanceConfigError("every A_k must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise InstanceConfigError("every A_k must be positive definite")
        if np.abs(np.einsum("k,kij->ij", w, A) - np.eye(d)).max() > AFFINE_TOL:
            raise InstanceConfigError("sum_k w_k A_k != I")
        if np.abs(w @ b).max() > AFFINE_TOL:
            raise InstanceConfigError("sum_k w_k b_k != 0")
        alphas = np.asarray(self.alphas, dtype=np.float64)
        pos = np.asarray(self.phi_positive, dtype=np.int64)
        neg = np.asarray(self.phi_negative, dtype=np.int64)
        if alphas.shape != (len(aux),) or pos.shape != (len(aux),) or neg.shape != (len(aux),):
            raise InstanceConfigError("alphas and Phi need one entry per auxiliary map")
        bp, bn = multipliers(w, pos, neg, alphas, [a.lambda_ub for a in aux], self.gamma)
        if self.beta_positive is not None:
            if not (np.allclose(self.beta_positive, bp, rtol=1e-12) and np.allclose(self.beta_negative, bn, rtol=1e-12)):
                raise InstanceConfigError("stored multipliers disagree with the multiplier formula")
        radii = None if self.radii is None else np.asarray(self.radii, dtype=np.float64).reshape(K)
        if self.truncate and radii is None:
            raise InstanceConfigError("truncated instances need one radius per input")
        for name, val in (("weights", w), ("A", A), ("b", b), ("alphas", alphas), ("phi_positive", pos),
                          ("phi_negative", neg), ("beta_positive", bp), ("beta_negative", bn), ("radii", radii)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "aux", aux)

    # -- structure -------------------------------------------------------------
    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def K_tilde(self) -> int:
        return len(self.aux)

    @property
    def dim(self) -> int:
        return self.mu_bar.dim

    def members(self, k: int) -> list[tuple[int, int, float]]:
        """``(aux index, sign, beta)`` for every signed auxiliary assigned to input ``k``."""
        if not 0 <= k < self.K:
            raise IndexError(f"input index {k} out of range 0..{self.K - 1}")
        out = [(i, +1, self.beta_positive[i]) for i in range(self.K_tilde) if self.phi_positive[i] == k]
        out += [(i, -1, self.beta_negative[i]) for i in range(self.K_tilde) if self.phi_negative[i] == k]
        return out

    def modulus(self, k: int) -> float:
        """Strong-convexity modulus of ``phi_k`` guaranteed by construction."""
        lam = sum(beta * self.aux[i].lambda_lb for i, _, beta in self.members(k))
        return float(lam + self.gamma * np.linalg.eigvalsh(self.A[k])[0])

    # -- maps and potentials ----------------------------------------------------
    def map_eval(self, k: int, x) -> np.ndarray:
        x, single = _points(x, self.dim)
        out = self.gamma * (x @ self.A[k] + self.b[k])
        for i, sign, beta in self.members(k):
            out += beta * (self.aux[i].forward(x) if sign > 0 else self.aux[i].backward(x))
        return out[0] if single else out

    def all_maps(self, x) -> np.ndarray:
        """``T_k(x)`` for every ``k``, shape ``(K, N, d)``; each auxiliary is evaluated once."""
        x, _ = _points(x, self.dim)
        fwd = [a.forward(x) for a in self.aux]
        out = self.gamma * (np.einsum("nj,kij->kni", x, self.A) + self.b[:, None, :])
        for i, a in enumerate(self.aux):
            out[self.phi_positive[i]] += self.beta_positive[i] * fwd[i]
            out[self.phi_negative[i]] += self.beta_negative[i] * (a.lambda_ub * x - fwd[i])
        return out

    def potential(self, k: int, x):
        x, single = _points(x, self.dim)
        out = self.gamma * np.einsum("ni,ni->n", 0.5 * x @ self.A[k] + self.b[k], x)
        for i, sign, beta in self.members(k):
            a = self.aux[i]
            out += beta * (a.forward_potential(x) if sign > 0 else a.backward_potential(x))
        return float(out[0]) if single else out

    def hessian(self, k: int, x) -> np.ndarray:
        x, single = _points(x, self.dim)
        out = np.broadcast_to(self.gamma * self.A[k], (x.shape[0], self.dim, self.dim)).copy()
        eye = np.eye(self.dim)
        for i, sign, beta in self.members(k):
            h = self.aux[i].forward_hessian(x)
            out += beta * (h if sign > 0 else self.aux[i].lambda_ub * eye - h)
        return out[0] if single else out

    # -- sampling ---------------------------------------------------------------
    def input_measure(self, k: int) -> "InputMeasure":
        return InputMeasure(self, k)

    def to_problem(self):
        from .fixed_point import BarycenterProblem

        radii = tuple(float(r) for r in self.radii) if self.truncate else ()
        return BarycenterProblem(tuple(self.input_measure(k) for k in range(self.K)), self.weights, radii, self.mu_bar)

    # -- persistence ------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "stochbary-instance/1",
            "dim": self.dim,
            "K": self.K,
            "K_tilde": self.K_tilde,
            "mu_bar": measure_to_dict(self.mu_bar),
            "weights": self.weights.tolist(),
            "aux": [a.to_dict() for a in self.aux],
            "alphas": self.alphas.tolist(),
            "phi_positive": self.phi_positive.tolist(),
            "phi_negative": self.phi_negative.tolist(),
            "beta_positive": self.beta_positive.tolist(),
            "beta_negative": self.beta_negative.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "gamma": float(self.gamma),
            "truncate": bool(self.truncate),
            "radii": None if self.radii is None else self.radii.tolist(),
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(
            measure_from_dict(d["mu_bar"]),
            np.asarray(d["weights"], dtype=np.float64),
            tuple(AuxiliaryMap.from_dict(a) for a in d["aux"]),
            np.asarray(d["alphas"], dtype=np.float64),
            np.asarray(d["phi_positive"], dtype=np.int64),
            np.asarray(d["phi_negative"], dtype=np.int64),
            np.asarray(d["A"], dtype=np.float64),
            np.asarray(d["b"], dtype=np.float64),
            float(d["gamma"]),
            bool(d["truncate"]),
            None if d.get("radii") is None else np.asarray(d["radii"], dtype=np.float64),
            None if d.get("beta_positive") is None else np.asarray(d["beta_positive"], dtype=np.float64),
            None if d.get("beta_negative") is None else np.asarray(d["beta_negative"], dtype=np.float64),
            d.get("seed"),
            d.get("diagnostics", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_radii(self, radii) -> "Instance":
        d = self.to_dict()
        d["radii"] = list(np.asarray(radii, dtype=np.float64))
        d["diagnostics"] = {}
        return Instance.from_dict(d)


def _points(x, d: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


@dataclass(frozen=True, eq=False)
class InputMeasure:
    """The input measure ``nu_k``: ``T_k # mu_bar``, truncated to the ball of radius ``radii[k]`` if requested."""

    instance: Instance
    k: int
    max_attempts_factor: float = 50.0

    @property
    def dim(self) -> int:
        return self.instance.dim

    def sample_with_ratio(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        inst = self.instance

        def propose(m):
            return inst.map_eval(self.k, inst.mu_bar.sample_points(m, rng)).reshape(m, inst.dim)

        if not inst.truncate:
            return propose(n), 0.0
        pts, acc = rejection_draw(propose, n, float(inst.radii[self.k]), self.max_attempts_factor)
        return pts, 1.0 - acc

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_with_ratio(n, rng)[0]


def instance_map_eval(instance: Instance, k: int, x) -> np.ndarray:
    return instance.map_eval(k, x)


def instance_potential_eval(instance: Instance, k: int, x):
    return instance.potential(k, x)


def instance_sample(instance: Instance, k: int, n: int, stream: Stream | int) -> SampleBatch:
    """``n`` draws of ``nu_k``; the rejection ratio is kept in the provenance."""
    if n < 1:
        raise ValueError("n must be positive")
    stream = as_stream(stream)
    pts, ratio = instance.input_measure(k).sample_with_ratio(n, stream.generator())
    return SampleBatch(pts, {**stream.provenance(), "n": int(n), "rejection_ratio": ratio})


def invert_map(instance: Instance, k: int, y, tol: float = 1e-10, max_iter: int = 200, raise_on_failure: bool = True):
    """Solve ``T_k(x) = y`` by damped Newton on ``phi_k(x) - <y, x>``.

    Uses the analytic Hessian and Armijo backtracking. Works on one point or a
    batch.

    Returns
    -------
    x : ndarray
        Preimages.
    conjugate : ndarray or float
        ``phi_k^*(y) = <y, x> - phi_k(x)``.
    """
    y, single = _points(y, instance.dim)
    x = y.copy()
    converged = np.zeros(y.shape[0], dtype=bool)
    residual = np.full(y.shape[0], np.inf)
    for _ in range(max_iter):
        active = np.flatnonzero(~converged)
        if active.size == 0:
            break
        xa, ya = x[active], y[active]
        grad = instance.map_eval(k, xa).reshape(xa.shape) - ya
        res = np.linalg.norm(grad, axis=1)
        residual[active] = res
        done = res <= tol
        converged[active[done]] = True
        keep = ~done
        if not keep.any():
            break
        idx, xa, ya, grad = active[keep], xa[keep], ya[keep], grad[keep]
        H = instance.hessian(k, xa).reshape(-1, instance.dim, instance.dim)
        step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        decrease = np.einsum("ij,ij->i", grad, step)
        f0 = instance.potential(k, xa) - np.einsum("ij,ij->i", ya, xa)
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(40):
            cand = xa[pending] - t[pending, None] * step[pending]
            f1 = instance.potential(k, cand) - np.einsum("ij,ij->i", ya[pending], cand)
            ok = f1 <= f0[pending] - 1e-4 * t[pending] * decrease[pending]
            # rounding in phi can hide the decrease of a tiny Newton step
            ok |= res[keep][pending] < 1e-6
            sub = np.flatnonzero(pending)
            pending[sub[ok]] = False
            if not pending.any():
                break
            t[pending] *= 0.5
        x[idx] = xa - t[:, None] * step
    if not converged.all():
        grad = instance.map_eval(k, x[~converged]).reshape(-1, instance.dim) - y[~converged]
        residual[~converged] = np.linalg.norm(grad, axis=1)
        converged[~converged] = residual[~converged] <= tol
    if raise_on_failure and not converged.all():
        raise InversionError(
            f"Newton inversion failed for {int((~converged).sum())} points; worst residual {residual.max():.3e}",
            residual,
        )
    conj = np.einsum("ij,ij->i", y, x) - instance.potential(k, x)
    if single:
        return x[0], float(conj[0])
    return x, conj


def _inflated(gm: GaussianMixture, factor: float) -> GaussianMixture:
    return GaussianMixture(gm.weights, gm.means, gm.covariances * factor)


def _proposal_draws(mu_bar: GaussianMixture, M: int, inflation: float, rng: np.random.Generator):
    """Draws from ``0.5 mu_bar + 0.5 mu_bar_inflated`` with importance weights ``dmu_bar / dq``."""
    wide = _inflated(mu_bar, inflation)
    use_wide = rng.random(M) < 0.5
    x = np.empty((M, mu_bar.dim))
    n_wide = int(use_wide.sum())
    x[~use_wide] = mu_bar.sample_points(M - n_wide, rng)
    x[use_wide] = wide.sample_points(n_wide, rng)
    log_ratio = wide.log_density(x) - mu_bar.log_density(x)
    weights = 1.0 / (0.5 + 0.5 * np.exp(np.minimum(log_ratio, 700.0)))
    return x, weights


def tail_masses(instance: Instance, radii, M: int, stream: Stream | int, inflation: float = 4.0) -> np.ndarray:
    """Importance-sampling estimates of ``P(|T_k(X)| > r)`` for ``X ~ mu_bar``, shape ``(K, len(radii))``."""
    stream = as_stream(stream)
    x, w = _proposal_draws(instance.mu_bar, M, inflation, stream.generator())
    norms = np.linalg.norm(instance.all_maps(x), axis=2)
    radii = np.asarray(radii, dtype=np.float64)
    return np.stack([(w[None, :] * (norms[k][None, :] > radii[:, None])).mean(axis=1) for k in range(instance.K)])


def default_radii(
    instance: Instance, tail_mass: float, M: int, stream: Stream | int, inflation: float = 4.0, ratio: float = 1.25
) -> np.ndarray:
    """Smallest grid radius ``ratio^i`` per input whose estimated tail mass is at most ``tail_mass``."""
    grid = ratio ** np.arange(0, 60)
    masses = tail_masses(instance, grid, M, stream, inflation)
    out = np.empty(instance.K)
    for k in range(instance.K):
        ok = np.flatnonzero(masses[k] <= tail_mass)
        out[k] = grid[ok[0]]
    return out


def epsilon_diagnostics(
    instance: Instance,
    M: int,
    stream: Stream | int,
    radii=None,
    inflation: float = 4.0,
    conjugate: str = "fenchel",
    block: int = 50_000,
) -> dict:
    """Monte-Carlo estimates of the sub-optimality certificate of ``mu_bar``.

    For each input ``k`` with pushforward ``P_k = T_k # mu_bar``, ball ``B_k`` and
    ``p_k = P_k(B_k)``, the integrand factor is ``c(y) = (1 - p_k)/p_k + 1{y not in B_k}``.

    ``eps1_k = E_{P_k}[2 |y|^2 c(y)]``, ``eps2_k = E_{P_k}[| |y|^2 - 2 phi_k^*(y) | c(y)]`` and
    ``eps = sum_k w_k (2 W2(mu_bar, P_k) sqrt(eps1_k) + eps1_k + eps2_k)``, with
    ``W2(mu_bar, P_k)^2 = E_{mu_bar} |x - T_k(x)|^2``.

    The certificate states ``V(mu_bar) <= inf V + eps`` for the truncated inputs.
    Expectations are importance-sampled from the defensive mixture
    ``0.5 mu_bar + 0.5 mu_bar_inflated`` so that the far tails are visited. The
    conjugate at ``y = T_k(x)`` is the Fenchel value ``<x, y> - phi_k(x)``
    (``conjugate="fenchel"``) or is recomputed from ``y`` alone by Newton
    inversion (``conjugate="invert"``).

    Returns
    -------
    dict
        ``eps1``, ``eps2``, ``eps_k``, ``w2_sq`` and ``p_inside`` (lists over
        ``k``), their standard errors, ``eps_total``, ``eps_total_se`` and
        ``V_bar``, the value ``sum_k w_k W2(mu_bar, P_k)^2`` of the untruncated
        problem.
    """
    if conjugate not in ("fenchel", "invert"):
        raise ValueError("conjugate must be 'fenchel' or 'invert'")
    stream = as_stream(stream)
    K = instance.K
    if radii is None:
        radii = instance.radii if instance.truncate else np.full(K, np.inf)
    radii = np.asarray(radii, dtype=np.float64)
    x_all, w_all = _proposal_draws(instance.mu_bar, M, inflation, stream.generator())
    # per-sample pieces, filled block by block
    out_ind = np.zeros((K, M), dtype=bool)
    y_sq = np.empty((K, M))
    gap = np.empty((K, M))
    disp = np.empty((K, M))
    inversion_failures = 0
    for start in range(0, M, block):
        sl = slice(start, min(M, start + block))
        x = x_all[sl]
        ys = instance.all_maps(x)
        for k in range(K):
            y = ys[k]
            y_sq[k, sl] = np.einsum("ij,ij->i", y, y)
            out_ind[k, sl] = np.sqrt(y_sq[k, sl]) > radii[k]
            disp[k, sl] = np.einsum("ij,ij->i", x - y, x - y)
            if conjugate == "fenchel":
                conj = np.einsum("ij,ij->i", x, y) - instance.potential(k, x)
            else:
                _, conj = invert_map(instance, k, y, tol=1e-9, raise_on_failure=False)
                bad = ~np.isfinite(conj)
                inversion_failures += int(bad.sum())
            gap[k, sl] = np.abs(y_sq[k, sl] - 2.0 * conj)
    if inversion_failures > 1e-3 * M * K:
        raise InversionError(f"{inversion_failures} conjugate evaluations failed", np.array([]))

    def mean_se(v):
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.shape[0]))

    res = {k: [] for k in ("eps1", "eps1_se", "eps2", "eps2_se", "w2_sq", "w2_sq_se", "p_inside", "eps_k")}
    total = 0.0
    total_var = 0.0
    for k in range(K):
        p_out = float((w_all * out_ind[k]).mean())
        p = 1.0 - p_out
        c = (1.0 - p) / p + out_ind[k]
        e1, e1_se = mean_se(w_all * 2.0 * y_sq[k] * c)
        e2, e2_se = mean_se(w_all * gap[k] * c)
        w2, w2_se = mean_se(w_all * disp[k])
        ek = 2.0 * math.sqrt(max(w2, 0.0) * max(e1, 0.0)) + e1 + e2
        # delta method in eps1 and eps2 (the W2 factor is comparatively precise)
        de1 = (math.sqrt(w2 / e1) if e1 > 0 else 0.0) + 1.0
        total_var += (instance.weights[k] ** 2) * ((de1 * e1_se) ** 2 + e2_se**2)
        total += instance.weights[k] * ek
        for key, val in (("eps1", e1), ("eps1_se", e1_se), ("eps2", e2), ("eps2_se", e2_se),
                         ("w2_sq", w2), ("w2_sq_se", w2_se), ("p_inside", p), ("eps_k", ek)):
            res[key].append(val)
    res["eps_total"] = float(total)
    res["eps_total_se"] = float(math.sqrt(total_var))
    res["V_bar"] = float(instance.weights @ np.asarray(res["w2_sq"]))
    res["radii"] = radii.tolist()
    res["M"] = int(M)
    res["inflation"] = float(inflation)
    res["conjugate"] = conjugate
    return res


@dataclass(frozen=True)
class InstanceConfig:
    """Inputs of the instance generator.

    ``mu_bar`` and ``auxiliaries`` take measure descriptions (see
    :func:`stochbary.measures.measure_from_dict`); when omitted, random
    Gaussian mixtures are drawn from the seed. ``radii`` defaults to the
    smallest grid radii with tail mass at most ``tail_mass``.
    """

    d: int = 2
    K: int = 5
    K_tilde: int = 5
    weights: tuple | None = None
    mu_bar: dict | None = None
    mu_components: int = 5
    mu_mean_radius: float = 4.5
    mu_var_range: tuple = (1.0, 2.0)
    auxiliaries: tuple | None = None
    aux_components: int = 5
    aux_mean_radius: float = 3.0
    aux_var_range: tuple = (0.1, 0.4)
    n_aux: int = 1000
    aux_theta: float = 3.0
    aux_lambda_lb: float = 0.05
    alphas: tuple | None = None
    alpha_range: tuple = (0.5, 1.5)
    gamma: float = 0.2
    phi_positive: tuple | None = None
    phi_negative: tuple | None = None
    A: tuple | None = None
    b: tuple | None = None
    affine_spread: float = 0.3
    affine_shift: float = 1.0
    truncate: bool = True
    radii: tuple | None = None
    tail_mass: float = 1e-9
    diag_M: int = 100_000
    n_ref: int = 2000
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InstanceConfigError(f"unknown instance config keys: {sorted(unknown)}")
        tupled = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**tupled)


def random_gaussian_mixture(
    d: int, n_components: int, mean_radius: float, var_range, rng: np.random.Generator
) -> GaussianMixture:
    """Components spread around a sphere, with random rotated covariances."""
    dirs = rng.standard_normal((n_components, d))
    if d == 2:
        ang = 2 * np.pi * (np.arange(n_components) + 0.3 * rng.random(n_components)) / n_components
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * mean_radius * rng.uniform(0.8, 1.2, size=(n_components, 1))
    covs = np.empty((n_components, d, d))
    for c in range(n_components):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        covs[c] = (q * rng.uniform(*var_range, size=d)) @ q.T
        covs[c] = 0.5 * (covs[c] + covs[c].T)
    w = rng.uniform(0.5, 1.5, size=n_components)
    w /= w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return GaussianMixture(w, means, covs)


def generate_instance(cfg: InstanceConfig, with_diagnostics: bool = True) -> Instance:
    """Run the generator for ``cfg``; optionally estimate and record the diagnostics."""
    stream = Stream(int(cfg.seed))
    rng = stream.child(Purpose.INSTANCE, 9).generator()
    d, K, Kt = cfg.d, cfg.K, cfg.K_tilde
    if K < 2 or Kt < 2 or 2 * Kt < K:
        raise InstanceConfigError("need K >= 2, K_tilde >= 2 and 2 * K_tilde >= K")
    w = np.full(K, 1.0 / K) if cfg.weights is None else np.asarray(cfg.weights, dtype=np.float64)
    if w.shape != (K,) or np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
        raise InstanceConfigError("weights must be K positive numbers summing to 1")
    if cfg.mu_bar is not None:
        mu_bar = measure_from_dict(cfg.mu_bar)
        if not isinstance(mu_bar, GaussianMixture):
            raise InstanceConfigError("mu_bar must be a Gaussian mixture")
    else:
        mu_bar = random_gaussian_mixture(d, cfg.mu_components, cfg.mu_mean_radius, cfg.mu_var_range, rng)
    if cfg.auxiliaries is not None:
        kappas = [measure_from_dict(a) for a in cfg.auxiliaries]
        if len(kappas) != Kt:
            raise InstanceConfigError("need K_tilde auxiliary measures")
    else:
        kappas = [
            random_gaussian_mixture(d, cfg.aux_components, cfg.aux_mean_radius, cfg.aux_var_range, rng)
            for _ in range(Kt)
        ]
    if cfg.alphas is not None:
        alphas = np.asarray(cfg.alphas, dtype=np.float64)
    else:
        alphas = rng.uniform(*cfg.alpha_range, size=Kt)
    if (cfg.phi_positive is None) != (cfg.phi_negative is None):
        raise InstanceConfigError("give both phi_positive and phi_negative or neither")
    if cfg.phi_positive is None:
        pos, neg = default_phi(K, Kt)
    else:
        pos = np.asarray(cfg.phi_positive, dtype=np.int64)
        neg = np.asarray(cfg.phi_negative, dtype=np.int64)
    if (cfg.A is None) != (cfg.b is None):
        raise InstanceConfigError("give both A and b or neither")
    if cfg.A is None:
        A, b = random_spd_affine(w, d, cfg.affine_spread, cfg.affine_shift, rng)
    else:
        A = np.asarray(cfg.A, dtype=np.float64)
        b = np.asarray(cfg.b, dtype=np.float64)
    aux = build_auxiliary_maps(mu_bar, kappas, cfg.n_aux, cfg.aux_theta, cfg.aux_lambda_lb, stream)
    parts = (mu_bar, w, tuple(aux), alphas, pos, neg, A, b, cfg.gamma)
    if not cfg.truncate:
        inst = Instance(*parts, False, None, seed=int(cfg.seed))
    elif cfg.radii is not None:
        inst = Instance(*parts, True, np.asarray(cfg.radii, dtype=np.float64), seed=int(cfg.seed))
    else:
        provisional = Instance(*parts, False, None, seed=int(cfg.seed))
        radii = default_radii(provisional, cfg.tail_mass, cfg.diag_M, stream.child(Purpose.DIAGNOSTIC, 0))
        inst = Instance(*parts, True, radii, seed=int(cfg.seed))
    if with_diagnostics:
        diag = epsilon_diagnostics(inst, cfg.diag_M, stream.child(Purpose.DIAGNOSTIC, 1))
        diag["V_hat_mu_bar"] = v_hat_reference(inst, cfg.n_ref, stream.child(Purpose.DIAGNOSTIC, 2))
        diag["V_hat_n"] = int(cfg.n_ref)
        ratios = [
            instance_sample(inst, k, cfg.n_ref, stream.child(Purpose.DIAGNOSTIC, 3, k)).provenance["rejection_ratio"]
            for k in range(K)
        ]
        diag["rejection_ratio"] = ratios
        diag["config"] = cfg.to_dict()
        object.__setattr__(inst, "diagnostics", diag)
    return inst


def v_hat_reference(instance: Instance, n: int, stream: Stream) -> float:
    """Empirical ``V_hat_n(mu_bar)`` with ``n`` points per measure."""
    mu = instance.mu_bar.sample_points(n, stream.child(0).generator())
    total = 0.0
    for k in range(instance.K):
        nu = instance.input_measure(k).sample_points(n, stream.child(1, k).generator())
        total += instance.weights[k] * optimal_assignment(mu, nu).cost
    return float(total)
