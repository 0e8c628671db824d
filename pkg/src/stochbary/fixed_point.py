"""Stochastic fixed-point iteration for W2 barycenters.

The iterate is represented as a chain of layer maps applied to a base measure
rho_0. Each layer is the weighted sum of K entropic map estimators. The
iterate mu_t is the pushforward rho_t truncated to the ball of radius R_t,
sampled by pushing fresh base draws through every layer and rejecting points
that land outside the ball.

One step from t to t+1:

1. draw N_t source points from mu_t, independently for each input k;
2. draw N_t target points from each input measure nu_k;
3. fit the entropic map estimator T_{t+1,k} with theta = N_t^(-1/(alpha_bar + d));
4. append the layer x -> sum_k w_k T_{t+1,k}(x) and choose R_{t+1}.

The radius search and the sample-size growth replace non-constructive
schedules with a tail-mass rule and geometric growth capped at ``N_max``.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .entropic_map import EntropicMap, build_entropic_map, support_radius, theta_schedule
from .evaluation import empirical_w2, optimal_assignment
from .measures import Measure, SampleBatch, measure_from_dict, measure_to_dict, rejection_draw
from .rng import Purpose, Stream, as_stream

TRAJECTORY_COLUMNS = ("t", "R", "N", "theta", "V_hat", "W2_to_ref", "accept_rate", "wall_ms")

# evaluation substream slots
_EVAL_INPUT, _EVAL_ITERATE, _EVAL_REFERENCE = 0, 1, 2


class IterationError(RuntimeError):
    """A failure inside one iteration, tagged with the iteration and input index."""

    def __init__(self, t: int, k: int | None, cause: BaseException):
        where = f"t={t}" + ("" if k is None else f", k={k}")
        super().__init__(f"iteration failed at {where}: {cause}")
        self.t = t
        self.k = k
        self.cause = cause


@dataclass(frozen=True)
class Schedule:
    """Constructive schedule for the iteration.

    Attributes
    ----------
    beta : float
        Exponent in the tail-mass target ``delta_t = min(c0, (t+1)^-(1+beta))``.
    N0, N_growth, N_max : sample size ``min(N_max, round(N0 * N_growth^t))``.
    alpha_bar : float
        Smoothness surrogate in [3, 4] used by the theta schedule.
    tail_mass_c0 : float
        Cap on the tail mass left outside the truncation ball.
    probe_size : int
        Number of untruncated draws used to pick the radius.
    radius_min, radius_ratio : geometric radius grid ``radius_min * radius_ratio^i``.
    """

    beta: float = 0.5
    N0: int = 1000
    N_growth: float = 1.5
    N_max: int = 5000
    alpha_bar: float = 3.0
    tail_mass_c0: float = 0.01
    probe_size: int = 5000
    radius_min: float = 1.0
    radius_ratio: float = 1.25
    sinkhorn_tol: float = 1e-7
    sinkhorn_max_iter: int = 10_000
    max_attempts_factor: float = 50.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.N0 < 1 or self.N_max < 1:
            raise ValueError("sample sizes must be positive")
        if self.N_growth < 1:
            raise ValueError("N_growth must be at least 1")
        if not 3.0 <= self.alpha_bar <= 4.0:
            raise ValueError("alpha_bar must lie in [3, 4]")
        if not 0 < self.tail_mass_c0 < 0.5:
            raise ValueError("tail_mass_c0 must lie in (0, 0.5)")
        if self.probe_size < 100:
            raise ValueError("probe_size must be at least 100")
        if not (self.radius_min > 0 and self.radius_ratio > 1):
            raise ValueError("radius grid needs radius_min > 0 and radius_ratio > 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    """Per-iteration metric settings; ``n_eval = 0`` disables metrics."""

    n_eval: int = 5000
    timing: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class BarycenterProblem:
    """K input measures with weights, optional support radii and a reference measure."""

    inputs: tuple
    weights: np.ndarray
    radii: tuple = ()
    reference: Measure | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.inputs) != w.shape[0] or w.shape[0] < 1:
            raise ValueError("need one positive weight per input measure")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        radii = tuple(self.radii) if self.radii else (None,) * len(self.inputs)
        if len(radii) != len(self.inputs):
            raise ValueError("need one radius entry per input measure")
        dims = {m.dim for m in self.inputs}
        if len(dims) != 1:
            raise ValueError("input measures disagree on the dimension")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "radii", radii)

    @property
    def K(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs[0].dim

    def sample_input(self, k: int, n: int, stream: Stream) -> np.ndarray:
        return self.inputs[k].sample_points(n, stream.generator())


def weighted_sum(weights, images: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_k w_k * images[k]`` accumulated in index order."""
    out = weights[0] * images[0]
    for w, img in zip(weights[1:], images[1:]):
        out = out + w * img
    return out


class LayerMap:
    """``x -> sum_k w_k T_k(x)`` for locally held estimators."""

    def __init__(self, t: int, weights, maps: Sequence[EntropicMap]):
        weights = np.asarray(weights, dtype=np.float64)
        if len(maps) != weights.shape[0]:
            raise ValueError("one map per weight is required")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("layer weights must sum to 1")
        self.t = int(t)
        self.weights = weights
        self.maps = list(maps)

    def images(self, x: np.ndarray) -> list[np.ndarray]:
        return [m(x) for m in self.maps]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return weighted_sum(self.weights, self.images(x))

    def info(self) -> list[dict]:
        return [
            {"lambda_lb": m.lambda_lb, "log_lambda_lb": m.log_lambda_lb, "degenerate": m.degenerate, **m.solver}
            for m in self.maps
        ]

    def to_dict(self) -> dict:
        return {"t": self.t, "weights": self.weights.tolist(), "maps": [m.to_dict() for m in self.maps]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerMap":
        return cls(d["t"], d["weights"], [EntropicMap.from_dict(m) for m in d["maps"]])


@dataclass(eq=False)
class PushforwardChain:
    """Base measure, composed layers and the radius history ``radii[t] = R_t``."""

    base: Measure
    layers: list = field(default_factory=list)
    radii: list = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.layers)

    @property
    def current_radius(self) -> float:
        if len(self.radii) != self.t + 1:
            raise RuntimeError("the current truncation radius has not been chosen")
        return self.radii[-1]

    def push(self, x: np.ndarray, n_layers: int | None = None) -> np.ndarray:
        for layer in self.layers[: self.t if n_layers is None else n_layers]:
            x = layer(x)
        return x

    def prefix(self, t: int) -> "PushforwardChain":
        """The chain representing the earlier iterate ``mu_t``."""
        if not 0 <= t <= self.t:
            raise ValueError(f"t={t} outside 0..{self.t}")
        return PushforwardChain(self.base, self.layers[:t], self.radii[: t + 1])

    def to_dict(self) -> dict:
        return {
            "base": measure_to_dict(self.base),
            "radii": [float(r) for r in self.radii],
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PushforwardChain":
        return cls(
            measure_from_dict(d["base"]),
            [LayerMap.from_dict(layer) for layer in d["layers"]],
            [float(r) for r in d["radii"]],
        )


def sample_size_schedule(t: int, schedule: Schedule, d: int = 1) -> int:
    """``min(N_max, round(N0 * N_growth^t))``, never below ``d + 1``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    n = min(schedule.N_max, int(round(schedule.N0 * schedule.N_growth**t)))
    return max(n, d + 1)


def tail_mass_target(t: int, schedule: Schedule) -> float:
    return min(schedule.tail_mass_c0, (t + 1.0) ** (-(1.0 + schedule.beta)))


def grid_radius_at_least(q: float, schedule: Schedule) -> float:
    """Smallest grid radius ``radius_min * radius_ratio^i >= q``."""
    r0, ratio = schedule.radius_min, schedule.radius_ratio
    if q <= r0:
        return r0
    i = max(0, int(math.floor(math.log(q / r0) / math.log(ratio))) - 1)
    while r0 * ratio**i < q:
        i += 1
    return r0 * ratio**i


def truncation_radius(
    chain: PushforwardChain, schedule: Schedule, t: int, stream: Stream, previous: float | None = None
) -> float:
    """Pick the truncation radius for the current (untruncated) pushforward.

    Draws ``probe_size`` base points, pushes them through every layer and
    returns the smallest grid radius whose ball leaves at most a fraction
    ``delta_t`` of the probes outside, never decreasing below ``previous``.
    """
    return _radius_and_acceptance(chain, schedule, t, stream, previous)[0]


def _radius_and_acceptance(chain, schedule, t, stream, previous=None) -> tuple[float, float]:
    probes = chain.push(chain.base.sample_points(schedule.probe_size, stream.generator()))
    if not np.all(np.isfinite(probes)):
        raise FloatingPointError("probe pushforward produced non-finite points")
    norms = np.sort(np.linalg.norm(probes, axis=1))
    allowed = int(math.floor(tail_mass_target(t, schedule) * norms.shape[0] + 1e-9))
    # at most `allowed` probes may exceed the radius
    q = norms[norms.shape[0] - 1 - allowed]
    r = grid_radius_at_least(float(q), schedule)
    if previous is not None:
        r = max(r, previous)
    return r, float(np.mean(norms <= r))


def rejection_sample(
    chain: PushforwardChain, n: int, stream: Stream, max_attempts_factor: float = 50.0
) -> SampleBatch:
    """Draw ``n`` points of the truncated iterate by rejection.

    The acceptance rate is stored under ``provenance["acceptance"]``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    gen = stream.generator()
    pts, rate = rejection_draw(
        lambda m: chain.push(chain.base.sample_points(m, gen)), n, chain.current_radius, max_attempts_factor
    )
    return SampleBatch(pts, {**stream.provenance(), "n": int(n), "acceptance": rate})


class LocalBackend:
    """Builds each layer in-process; the ``K`` fits optionally run on threads."""

    def __init__(self, problem: BarycenterProblem, schedule: Schedule, stream: Stream, workers: int = 1):
        self.problem = problem
        self.schedule = schedule
        self.stream = stream
        self.workers = workers

    def _fit(self, t: int, k: int, X: np.ndarray, theta: float, radius: float) -> EntropicMap:
        n = X.shape[0]
        try:
            Y = self.problem.sample_input(k, n, self.stream.child(Purpose.TARGET, t, k))
            r0_nu = self.problem.radii[k]
            return build_entropic_map(
                X,
                Y,
                theta,
                r0_mu=radius,
                r0_nu=support_radius(Y) if r0_nu is None else r0_nu,
                tol=self.schedule.sinkhorn_tol,
                max_iter=self.schedule.sinkhorn_max_iter,
            )
        except Exception as exc:
            raise IterationError(t, k, exc) from exc

    def build_layer(self, t: int, sources: list[np.ndarray], theta: float, radius: float):
        K = self.problem.K
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                maps = list(pool.map(lambda k: self._fit(t, k, sources[k], theta, radius), range(K)))
        else:
            maps = [self._fit(t, k, sources[k], theta, radius) for k in range(K)]
        return LayerMap(t + 1, self.problem.weights, maps)


@dataclass
class MetricRecord:
    """One trajectory row describing the iterate ``mu_t``.

    ``N`` and ``theta`` are the sample size and regularization of the
    estimators that produced ``mu_t`` (zero and NaN for ``t = 0``).
    ``accept_rate`` is the fraction of radius probes inside ``B(0, R_t)``.
    """

    t: int
    R: float
    N: int
    theta: float
    V_hat: float
    W2_to_ref: float
    accept_rate: float
    wall_ms: float
    layer_info: list = field(default_factory=list)

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in TRAJECTORY_COLUMNS)


@dataclass(eq=False)
class IterationState:
    t: int
    chain: PushforwardChain
    metrics: list = field(default_factory=list)


def eval_stream(stream: Stream, trial: int, slot: int, index: int = 0) -> Stream:
    return stream.child(Purpose.EVAL, trial, slot, index)


def eval_input_samples(problem: BarycenterProblem, n: int, stream: Stream, trial: int = 0) -> list[np.ndarray]:
    return [problem.sample_input(k, n, eval_stream(stream, trial, _EVAL_INPUT, k)) for k in range(problem.K)]


def eval_reference_samples(problem: BarycenterProblem, n: int, stream: Stream, trial: int = 0):
    if problem.reference is None:
        return None
    return problem.reference.sample_points(n, eval_stream(stream, trial, _EVAL_REFERENCE).generator())


def iterate_metrics(
    chain: PushforwardChain,
    problem: BarycenterProblem,
    n_eval: int,
    stream: Stream,
    trial: int = 0,
    nu_samples=None,
    ref_samples=None,
) -> tuple[float, float]:
    """``(V_hat, W2_to_ref)`` for the iterate represented by ``chain``."""
    if n_eval <= 0:
        return math.nan, math.nan
    mu = rejection_sample(chain, n_eval, eval_stream(stream, trial, _EVAL_ITERATE, chain.t)).points
    if nu_samples is None:
        nu_samples = eval_input_samples(problem, n_eval, stream, trial)
    v = float(sum(w * optimal_assignment(mu, nu).cost for w, nu in zip(problem.weights, nu_samples)))
    if ref_samples is None:
        ref_samples = eval_reference_samples(problem, n_eval, stream, trial)
    w2 = math.nan if ref_samples is None else empirical_w2(mu, ref_samples)
    return v, w2


def initial_state(
    problem: BarycenterProblem,
    schedule: Schedule,
    stream: Stream,
    base: Measure | None = None,
    eval_cfg: EvalConfig = EvalConfig(),
) -> IterationState:
    """State for ``t = 0``: no layers, radius ``R_0`` chosen, metrics of ``mu_0``."""
    from .measures import standard_gaussian

    stream = as_stream(stream)
    start = time.perf_counter()
    chain = PushforwardChain(base if base is not None else standard_gaussian(problem.dim))
    if chain.base.dim != problem.dim:
        raise ValueError("base measure dimension differs from the inputs")
    radius, acc = _radius_and_acceptance(chain, schedule, 0, stream.child(Purpose.PROBE, 0))
    chain.radii.append(radius)
    wall = (time.perf_counter() - start) * 1e3
    state = IterationState(0, chain)
    state.metrics.append(_record(state, problem, stream, eval_cfg, 0, math.nan, acc, wall, []))
    return state


def _record(state, problem, stream, eval_cfg, N, theta, acc, wall, info) -> MetricRecord:
    v, w2 = iterate_metrics(state.chain, problem, eval_cfg.n_eval, stream)
    return MetricRecord(
        state.t, state.chain.current_radius, N, theta, v, w2, acc, wall if eval_cfg.timing else math.nan, info
    )


def iterate(
    state: IterationState,
    problem: BarycenterProblem,
    schedule: Schedule,
    stream: Stream,
    eval_cfg: EvalConfig = EvalConfig(),
    backend=None,
) -> IterationState:
    """Advance the iteration by one step and append the metrics of the new iterate."""
    stream = as_stream(stream)
    backend = backend if backend is not None else LocalBackend(problem, schedule, stream)
    t = state.t
    chain = state.chain
    d = problem.dim
    start = time.perf_counter()
    N = sample_size_schedule(t, schedule, d)
    theta = theta_schedule(N, N, schedule.alpha_bar, d)
    radius = chain.current_radius
    sources = []
    for k in range(problem.K):
        try:
            batch = rejection_sample(
                chain, N, stream.child(Purpose.SOURCE, t, k), schedule.max_attempts_factor
            )
        except Exception as exc:
            raise IterationError(t, k, exc) from exc
        sources.append(batch.points)
    layer = backend.build_layer(t, sources, theta, radius)
    new_chain = PushforwardChain(chain.base, chain.layers + [layer], list(chain.radii))
    try:
        new_radius, acc = _radius_and_acceptance(
            new_chain, schedule, t + 1, stream.child(Purpose.PROBE, t + 1), previous=radius
        )
    except Exception as exc:
        raise IterationError(t + 1, None, exc) from exc
    new_chain.radii.append(new_radius)
    wall = (time.perf_counter() - start) * 1e3
    new_state = IterationState(t + 1, new_chain, list(state.metrics))
    info = layer.info() if hasattr(layer, "info") else []
    new_state.metrics.append(_record(new_state, problem, stream, eval_cfg, N, theta, acc, wall, info))
    return new_state


def run(
    problem: BarycenterProblem,
    schedule: Schedule,
    T_iters: int,
    eval_cfg: EvalConfig = EvalConfig(),
    stream: Stream | int = 0,
    base: Measure | None = None,
    state: IterationState | None = None,
    backend=None,
    progress: Callable[[MetricRecord], None] | None = None,
) -> IterationState:
    """Run ``T_iters`` iterations (continuing from ``state`` when given)."""
    if T_iters < 1:
        raise ValueError("T_iters must be at least 1")
    stream = as_stream(stream)
    if state is None:
        state = initial_state(problem, schedule, stream, base, eval_cfg)
        if progress:
            progress(state.metrics[-1])
    for _ in range(T_iters):
        state = iterate(state, problem, schedule, stream, eval_cfg, backend)
        if progress:
            progress(state.metrics[-1])
    return state


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def trajectory_csv(metrics: Sequence[MetricRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    for rec in metrics:
        buf.write(",".join(_fmt(v) for v in rec.row()) + "\n")
    return buf.getvalue()


def read_trajectory_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{k: (int(v) if k in ("t", "N") else float(v)) for k, v in r.items()} for r in rows]


def with_schedule(schedule: Schedule, **changes) -> Schedule:
    return replace(schedule, **changes)


def state_to_dict(state: IterationState) -> dict:
    """Chain and metrics of a run; enough to resume it exactly."""
    return {
        "t": state.t,
        "chain": state.chain.to_dict(),
        "metrics": [asdict(m) for m in state.metrics],
    }


def state_from_dict(d: dict) -> IterationState:
    chain = PushforwardChain.from_dict(d["chain"])
    if chain.t != int(d["t"]):
        raise ValueError("chain length disagrees with the recorded iteration")
    return IterationState(int(d["t"]), chain, [MetricRecord(**m) for m in d["metrics"]])


EVAL_COLUMNS = ("trial", "t", "V_hat", "W2_ref")


def evaluate_trials(
    chain: PushforwardChain, problem: BarycenterProblem, n_eval: int, trials: int, stream: Stream | int
) -> tuple[list[tuple], list[float]]:
    """``V_hat`` and ``W2`` to the reference for every prefix ``mu_0..mu_T`` over independent trials.

    Trial ``i`` draws fresh input, reference and iterate samples from the
    evaluation substreams with trial index ``i``. The chain is not modified.

    Returns
    -------
    rows : list of ``(trial, t, V_hat, W2_ref)``
    reference : list of ``V_hat(mu_ref)`` per trial (NaN without a reference)
    """
    stream = as_stream(stream)
    if n_eval < 1:
        raise ValueError("n_eval must be positive")
    rows = []
    reference = []
    for trial in range(trials):
        nus = eval_input_samples(problem, n_eval, stream, trial)
        ref = eval_reference_samples(problem, n_eval, stream, trial)
        for t in range(chain.t + 1):
            v, w2 = iterate_metrics(chain.prefix(t), problem, n_eval, stream, trial, nus, ref)
            rows.append((trial, t, v, w2))
        if ref is None:
            reference.append(math.nan)
        else:
            reference.append(float(sum(w * optimal_assignment(ref, nu).cost for w, nu in zip(problem.weights, nus))))
    return rows, reference


def eval_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    buf.write(",".join(EVAL_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    return buf.getvalue()
