"""Run configuration and problem construction for the command-line tools.

A run configuration is a JSON object. Every key is optional except ``seed``::

    {
      "seed": 0,
      "instance": "shipped" | "path/to/instance.json"
                  | {"generate": {...instance generator fields...}}
                  | {"gaussians": {"means": [...], "covariances": [...],
                                   "weights": [...], "truncation_sigma": 8}},
      "schedule": {...Schedule fields...},
      "iterations": 3,
      "eval": {"n_eval": 5000, "trials": 20, "trim": 0.1, "timing": false},
      "base": {...measure description...},
      "output_dir": "runs/example"
    }

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .evaluation import gaussian_barycenter_oracle
from .fixed_point import BarycenterProblem, EvalConfig, Schedule
from .instance_gen import Instance, InstanceConfig, generate_instance
from .measures import Gaussian, TruncatedMeasure, measure_from_dict

SHIPPED_INSTANCE = "instance_2d.json"
OUTPUT_ROOT_ENV = "STOCHBARY_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class EvalSettings:
    n_eval: int = 5000
    trials: int = 20
    trim: float = 0.10
    timing: bool = False

    def __post_init__(self):
        if self.n_eval < 0:
            raise ConfigError("eval.n_eval must be non-negative")
        if self.trials < 4:
            raise ConfigError("eval.trials must be at least 4 (trimmed statistics need 4 values)")
        if not 0.0 <= self.trim <= 0.25:
            raise ConfigError("eval.trim must lie in [0, 0.25]")

    def per_iteration(self) -> EvalConfig:
        return EvalConfig(n_eval=self.n_eval, timing=self.timing)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    instance: object = "shipped"
    schedule: Schedule = field(default_factory=Schedule)
    iterations: int = 3
    eval: EvalSettings = field(default_factory=EvalSettings)
    base: dict | None = None
    output_dir: str | None = None
    source_dir: str = "."

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "instance": self.instance,
            "schedule": self.schedule.to_dict(),
            "iterations": self.iterations,
            "eval": asdict(self.eval),
            "base": self.base,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, source_dir: str | os.PathLike = ".") -> "RunConfig":
        d = dict(d)
        # a manifest written by a previous command carries its config
        if "command" in d and "config" in d:
            d = dict(d["config"])
        known = {"seed", "instance", "schedule", "iterations", "eval", "base", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d or not isinstance(d["seed"], int):
            raise ConfigError("an integer 'seed' is required")
        try:
            schedule = Schedule(**d.get("schedule", {}))
            ev = EvalSettings(**d.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(
            seed=d["seed"],
            instance=d.get("instance", "shipped"),
            schedule=schedule,
            iterations=int(d.get("iterations", 3)),
            eval=ev,
            base=d.get("base"),
            output_dir=d.get("output_dir"),
            source_dir=str(source_dir),
        )


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(load_json(path), Path(path).resolve().parent)


def shipped_instance_path() -> Path:
    return Path(str(resources.files("stochbary") / "data" / SHIPPED_INSTANCE))


def load_instance(path) -> Instance:
    return Instance.from_dict(load_json(path))


def resolve(path, source_dir) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(source_dir) / p


def gaussian_problem(means, covariances, weights=None, truncation_sigma: float = 8.0) -> BarycenterProblem:
    """Truncated Gaussian inputs with the Gaussian barycenter as reference.

    Input ``k`` is truncated to the ball of radius
    ``|m_k| + truncation_sigma * sqrt(lambda_max(S_k))``.
    """
    means = [np.asarray(m, dtype=np.float64) for m in means]
    covs = [np.asarray(c, dtype=np.float64) for c in covariances]
    K = len(means)
    if K < 1 or len(covs) != K:
        raise ConfigError("need matching lists of means and covariances")
    w = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
    radii = tuple(
        float(np.linalg.norm(m) + truncation_sigma * math.sqrt(np.linalg.eigvalsh(c)[-1])) for m, c in zip(means, covs)
    )
    bm, bS = gaussian_barycenter_oracle(means, covs, w)
    inputs = tuple(TruncatedMeasure(Gaussian(m, c), r) for m, c, r in zip(means, covs, radii))
    return BarycenterProblem(inputs, w, radii, Gaussian(bm, bS))


def build_problem(cfg: RunConfig) -> tuple[BarycenterProblem, Instance | None]:
    """The barycenter problem described by ``cfg.instance`` (and the instance, if any)."""
    spec = cfg.instance
    if spec == "shipped":
        inst = load_instance(shipped_instance_path())
        return inst.to_problem(), inst
    if isinstance(spec, str):
        inst = load_instance(resolve(spec, cfg.source_dir))
        return inst.to_problem(), inst
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, body), = spec.items()
        if kind == "path":
            inst = load_instance(resolve(body, cfg.source_dir))
            return inst.to_problem(), inst
        if kind == "generate":
            inst = generate_instance(InstanceConfig.from_dict(body), with_diagnostics=False)
            return inst.to_problem(), inst
        if kind == "gaussians":
            body = dict(body)
            try:
                return gaussian_problem(
                    body.pop("means"), body.pop("covariances"), body.pop("weights", None),
                    float(body.pop("truncation_sigma", 8.0)),
                ), None
            except KeyError as exc:
                raise ConfigError(f"gaussians instance needs {exc}") from exc
    raise ConfigError("instance must be 'shipped', a path, or one of {path, generate, gaussians}")


def base_measure(cfg: RunConfig):
    return None if cfg.base is None else measure_from_dict(cfg.base)


def output_dir(path: str | None, cfg: RunConfig | None = None) -> Path:
    """Output directory; relative paths go under ``$STOCHBARY_OUTPUT_ROOT`` when it is set."""
    chosen = path if path is not None else (cfg.output_dir if cfg is not None else None)
    if chosen is None:
        raise ConfigError("no output directory given")
    p = Path(chosen)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p
