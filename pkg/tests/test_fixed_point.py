import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from stochbary.config import gaussian_problem
from stochbary.entropic_map import build_entropic_map
from stochbary.evaluation import empirical_w2
from stochbary.fixed_point import (
    BarycenterProblem,
    EvalConfig,
    IterationError,
    LayerMap,
    PushforwardChain,
    Schedule,
    evaluate_trials,
    eval_csv,
    initial_state,
    iterate,
    read_trajectory_csv,
    rejection_sample,
    run,
    sample_size_schedule,
    state_from_dict,
    state_to_dict,
    tail_mass_target,
    trajectory_csv,
    truncation_radius,
    weighted_sum,
)
from stochbary.measures import Gaussian, RejectionBudgetError, TruncatedMeasure, standard_gaussian
from stochbary.rng import Stream

NO_TIMING = EvalConfig(n_eval=300, timing=False)


def two_gaussians():
    return gaussian_problem(
        [[-1.0, 0.0], [1.0, 0.5]],
        [np.diag([1.0, 0.5]), np.array([[0.8, 0.2], [0.2, 1.2]])],
    )


def zero_layer_chain(radius, d=2):
    return PushforwardChain(standard_gaussian(d), [], [radius])


def self_transport_layer(seed=0, n=400):
    mu = TruncatedMeasure(standard_gaussian(2), 4.0)
    rng = np.random.default_rng(seed)
    maps = [
        build_entropic_map(mu.sample_points(n, rng), mu.sample_points(n, rng), 0.05, r0_mu=4.0, r0_nu=4.0)
        for _ in range(2)
    ]
    return LayerMap(1, [0.5, 0.5], maps)


class TestSchedule:
    def test_sample_sizes(self):
        sch = Schedule(N0=1000, N_growth=2.0, N_max=5000)
        assert sample_size_schedule(0, sch) == 1000
        assert sample_size_schedule(3, sch) == 5000

    def test_sample_size_floor(self):
        assert sample_size_schedule(0, Schedule(N0=10), d=10) == 11

    def test_tail_mass(self):
        sch = Schedule(beta=0.5, tail_mass_c0=0.01)
        assert tail_mass_target(0, sch) == 0.01
        assert tail_mass_target(99, sch) == pytest.approx(100 ** -1.5)

    @pytest.mark.parametrize(
        "kwargs",
        [{"beta": 0}, {"N_growth": 0.9}, {"alpha_bar": 5}, {"tail_mass_c0": 0.5}, {"probe_size": 50}, {"N0": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            Schedule(**kwargs)


class TestTruncationRadius:
    def test_standard_gaussian_tail(self):
        chain = PushforwardChain(standard_gaussian(2))
        r = truncation_radius(chain, Schedule(probe_size=100_000), 0, Stream(0))
        # chi-square with 2 dof: P(|x| > 3.035) = 0.01, next grid point up is 1.25^5
        assert r == pytest.approx(1.25**5)

    def test_all_probes_inside_smallest_radius(self):
        chain = PushforwardChain(Gaussian([0.0, 0.0], 1e-4 * np.eye(2)))
        assert truncation_radius(chain, Schedule(), 0, Stream(1)) == 1.0

    def test_tiny_tail_mass_covers_all_probes(self):
        sch = Schedule(probe_size=1000, tail_mass_c0=1e-5)
        chain = PushforwardChain(standard_gaussian(2))
        r = truncation_radius(chain, sch, 0, Stream(2))
        probes = chain.base.sample_points(1000, Stream(2).generator())
        top = np.linalg.norm(probes, axis=1).max()
        assert top <= r < 1.25 * top

    def test_never_decreases(self):
        chain = PushforwardChain(standard_gaussian(2))
        assert truncation_radius(chain, Schedule(), 0, Stream(3), previous=40.0) == 40.0

    def test_non_finite_probes(self):
        class Broken:
            def __call__(self, x):
                return np.full_like(x, np.nan)

        chain = PushforwardChain(standard_gaussian(2), [Broken()], [3.0])
        with pytest.raises(FloatingPointError):
            truncation_radius(chain, Schedule(), 1, Stream(0))


class TestRejectionSample:
    def test_huge_radius_matches_base(self):
        pts = rejection_sample(zero_layer_chain(1e9), 4000, Stream(4)).points
        ref = standard_gaussian(2).sample_points(4000, np.random.default_rng(99))
        for i in range(2):
            assert stats.ks_2samp(pts[:, i], ref[:, i]).pvalue > 0.01

    @pytest.mark.parametrize("r", [0.8, 1.5, 2.5])
    def test_acceptance_rate_matches_ball_probability(self, r):
        batch = rejection_sample(zero_layer_chain(r), 20_000, Stream(5))
        assert np.all(np.linalg.norm(batch.points, axis=1) <= r)
        p = 1 - math.exp(-r * r / 2)
        assert abs(batch.provenance["acceptance"] - p) <= 5 * math.sqrt(p * (1 - p) / 20_000) + 1e-3

    def test_radial_law_is_truncated_chi(self):
        r = 2.0
        pts = rejection_sample(zero_layer_chain(r), 20_000, Stream(6)).points
        radii = np.linalg.norm(pts, axis=1)
        edges = np.linspace(0, r, 11)
        cdf = lambda s: (1 - np.exp(-s * s / 2)) / (1 - math.exp(-r * r / 2))
        expected = np.diff(cdf(edges)) * radii.shape[0]
        observed = np.histogram(radii, edges)[0]
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_identity_like_layer_keeps_acceptance(self):
        r = 2.0
        base = rejection_sample(zero_layer_chain(r), 5000, Stream(7)).provenance["acceptance"]
        chain = PushforwardChain(standard_gaussian(2), [self_transport_layer()], [r, r])
        pushed = rejection_sample(chain, 5000, Stream(7)).provenance["acceptance"]
        assert abs(pushed - base) <= 0.05

    def test_deterministic(self):
        a = rejection_sample(zero_layer_chain(1.0), 100, Stream(8)).points
        b = rejection_sample(zero_layer_chain(1.0), 100, Stream(8)).points
        np.testing.assert_array_equal(a, b)

    def test_budget_error_names_radius(self):
        with pytest.raises(RejectionBudgetError, match="radius"):
            rejection_sample(zero_layer_chain(1e-3), 10, Stream(9), max_attempts_factor=2.0)

    def test_needs_radius(self):
        with pytest.raises(RuntimeError):
            rejection_sample(PushforwardChain(standard_gaussian(2)), 10, Stream(0))


class TestLayerMap:
    def test_weighted_identity(self, rng):
        layer = self_transport_layer()
        x = rng.normal(size=(50, 2)) * 3
        expected = 0.5 * layer.maps[0](x) + 0.5 * layer.maps[1](x)
        np.testing.assert_array_equal(layer(x), expected)
        np.testing.assert_array_equal(layer(x), weighted_sum(layer.weights, layer.images(x)))

    def test_weights_must_sum_to_one(self):
        layer = self_transport_layer()
        with pytest.raises(ValueError):
            LayerMap(1, [0.5, 0.6], layer.maps)

    def test_round_trip(self, rng):
        layer = self_transport_layer()
        back = LayerMap.from_dict(json.loads(json.dumps(layer.to_dict())))
        x = rng.normal(size=(20, 2))
        np.testing.assert_array_equal(back(x), layer(x))


class TestProblem:
    def test_zero_weight_rejected(self):
        mus = [standard_gaussian(2)] * 3
        with pytest.raises(ValueError, match="positive"):
            BarycenterProblem(mus, [1.0, 0.0, 0.0])

    def test_weights_sum(self):
        with pytest.raises(ValueError):
            BarycenterProblem([standard_gaussian(2)] * 2, [0.5, 0.6])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            BarycenterProblem([standard_gaussian(2), standard_gaussian(3)], [0.5, 0.5])


class TestRun:
    def test_bit_identical_reruns(self):
        prob = two_gaussians()
        sch = Schedule(N0=200, probe_size=2000)
        a = trajectory_csv(run(prob, sch, 3, NO_TIMING, 11).metrics)
        b = trajectory_csv(run(prob, sch, 3, NO_TIMING, 11).metrics)
        assert a == b
        rows = read_trajectory_csv(a)
        assert [r["t"] for r in rows] == [0, 1, 2, 3]
        assert all(0 < r["accept_rate"] <= 1 for r in rows)

    def test_radius_monotone_and_metrics_length(self):
        prob = two_gaussians()
        state = run(prob, Schedule(N0=200, probe_size=2000), 3, NO_TIMING, 3)
        radii = [m.R for m in state.metrics]
        assert sum(b < a for a, b in zip(radii, radii[1:])) == 0
        assert len(state.metrics) == state.t + 1 == state.chain.t + 1
        assert state.chain.radii == radii

    def test_trajectory_semantics(self):
        prob = two_gaussians()
        sch = Schedule(N0=200, N_growth=1.5, probe_size=2000)
        rows = run(prob, sch, 2, NO_TIMING, 0).metrics
        assert rows[0].N == 0 and math.isnan(rows[0].theta)
        assert [r.N for r in rows[1:]] == [200, 300]
        assert rows[1].theta == pytest.approx(200 ** -0.2)
        assert all(math.isnan(r.wall_ms) for r in rows)

    def test_resume_is_exact(self):
        prob = two_gaussians()
        sch = Schedule(N0=200, probe_size=2000)
        full = run(prob, sch, 3, NO_TIMING, 5)
        first = run(prob, sch, 1, NO_TIMING, 5)
        restored = state_from_dict(json.loads(json.dumps(state_to_dict(first))))
        rest = run(prob, sch, 2, NO_TIMING, 5, state=restored)
        assert trajectory_csv(rest.metrics) == trajectory_csv(full.metrics)

    def test_failure_reports_iteration_and_input(self):
        prob = two_gaussians()
        sch = Schedule(N0=100, probe_size=1000, sinkhorn_tol=1e-15, sinkhorn_max_iter=1)
        state = initial_state(prob, sch, Stream(0), eval_cfg=EvalConfig(n_eval=0))
        with pytest.raises(IterationError) as info:
            iterate(state, prob, sch, Stream(0), EvalConfig(n_eval=0))
        assert (info.value.t, info.value.k) == (0, 0)

    def test_metrics_disabled(self):
        state = run(two_gaussians(), Schedule(N0=100, probe_size=1000), 1, EvalConfig(n_eval=0), 0)
        assert all(math.isnan(m.V_hat) for m in state.metrics)

    def test_t_iters_positive(self):
        with pytest.raises(ValueError):
            run(two_gaussians(), Schedule(), 0)

    def test_single_input_recovers_it(self):
        nu = ([[1.0, -1.0]], [np.array([[1.0, 0.4], [0.4, 0.7]])])
        prob = gaussian_problem(*nu)
        state = run(prob, Schedule(N0=1000, probe_size=5000), 2, EvalConfig(n_eval=0), 21)
        n = 1000
        mu = rejection_sample(state.chain, n, Stream(77)).points
        a = prob.inputs[0].sample_points(n, np.random.default_rng(1))
        b = prob.inputs[0].sample_points(n, np.random.default_rng(2))
        assert empirical_w2(mu, a) <= 1.5 * empirical_w2(b, a)

    def test_evaluate_trials_does_not_touch_chain(self):
        prob = two_gaussians()
        state = run(prob, Schedule(N0=200, probe_size=2000), 1, NO_TIMING, 9)
        before = json.dumps(state.chain.to_dict())
        rows, ref = evaluate_trials(state.chain, prob, NO_TIMING.n_eval, 2, 9)
        assert json.dumps(state.chain.to_dict()) == before
        assert [(r[0], r[1]) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert len(ref) == 2 and all(np.isfinite(ref))
        # trial 0 reuses the per-iteration evaluation streams
        assert rows[1][2] == state.metrics[1].V_hat
        assert eval_csv(rows).splitlines()[0] == "trial,t,V_hat,W2_ref"


def test_pushforward_cost_per_layer():
    """Per-sample cost per layer stays flat: 3 layers cost under 3x a single layer, per layer."""
    layer = self_transport_layer(n=300)
    x = np.random.default_rng(0).normal(size=(20_000, 2))

    def timed(n_layers):
        chain = PushforwardChain(standard_gaussian(2), [layer] * n_layers, [4.0] * (n_layers + 1))
        best = math.inf
        for _ in range(3):
            start = time.perf_counter()
            chain.push(x)
            best = min(best, time.perf_counter() - start)
        return best

    one, three = timed(1), timed(3)
    assert (three / 3) / one < 3.0


@pytest.mark.slow
def test_one_iteration_decrement_two_gaussians():
    """One iteration lowers V_hat below its t=0 value in at least 16 of 20 seeds."""
    prob = two_gaussians()
    sch = Schedule(N0=500, probe_size=5000)
    wins = 0
    for seed in range(20):
        rows = run(prob, sch, 1, EvalConfig(n_eval=2000, timing=False), seed).metrics
        wins += rows[1].V_hat < rows[0].V_hat
    assert wins >= 16
