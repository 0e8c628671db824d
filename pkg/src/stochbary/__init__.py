"""Stochastic fixed-point iteration for Wasserstein barycenters with entropic OT map estimators."""

__version__ = "0.1.0"

from .distsim import coordinator_run, run_inprocess, run_loopback_tcp
from .entropic_map import EntropicMap, build_entropic_map, map_eval, potential_eval, theta_schedule
from .evaluation import (
    brute_force_w2,
    empirical_w2,
    gaussian_barycenter_oracle,
    gaussian_w2,
    optimal_assignment,
    trimmed_mean_iqr,
    v_hat,
)
from .fixed_point import BarycenterProblem, EvalConfig, PushforwardChain, Schedule, run
from .instance_gen import Instance, InstanceConfig, epsilon_diagnostics, generate_instance, invert_map
from .measures import Gaussian, GaussianMixture, TruncatedMeasure, sample
from .rng import Purpose, Stream
from .sinkhorn import sinkhorn_solve

__all__ = [
    "BarycenterProblem",
    "EntropicMap",
    "EvalConfig",
    "Gaussian",
    "GaussianMixture",
    "Instance",
    "InstanceConfig",
    "Purpose",
    "PushforwardChain",
    "Schedule",
    "Stream",
    "TruncatedMeasure",
    "brute_force_w2",
    "build_entropic_map",
    "coordinator_run",
    "empirical_w2",
    "epsilon_diagnostics",
    "gaussian_barycenter_oracle",
    "gaussian_w2",
    "generate_instance",
    "invert_map",
    "map_eval",
    "optimal_assignment",
    "potential_eval",
    "run",
    "run_inprocess",
    "run_loopback_tcp",
    "sample",
    "sinkhorn_solve",
    "theta_schedule",
    "trimmed_mean_iqr",
    "v_hat",
]
