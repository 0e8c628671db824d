"""Command-line interface: ``stochbary <command> ...``.

Commands
--------
generate         build a synthetic instance and its diagnostics
run              run the fixed-point iteration, write the trajectory and the chain
evaluate         repeated-trial evaluation of a saved chain
oracle-gaussian  closed-form Gaussian barycenter and pairwise W2 values
distsim          coordinator / agent processes of the message-passing simulation

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 protocol error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .config import (
    ConfigError,
    EvalSettings,
    RunConfig,
    base_measure,
    build_problem,
    load_json,
    load_run_config,
    output_dir,
)
from .distsim import (
    DEFAULT_TIMEOUT,
    AgentError,
    ProtocolError,
    accept,
    agent_serve,
    connect,
    coordinator_run,
    listen,
    run_inprocess,
    run_loopback_tcp,
)
from .evaluation import gaussian_barycenter_oracle, gaussian_w2, trimmed_mean_iqr
from .fixed_point import (
    IterationError,
    PushforwardChain,
    eval_csv,
    evaluate_trials,
    run,
    state_from_dict,
    state_to_dict,
    trajectory_csv,
)
from .instance_gen import InstanceConfig, InstanceConfigError, generate_instance
from .rng import Stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROTOCOL = 0, 2, 3, 4


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, default=_json_default)


def _write(path: Path, text: str) -> str:
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _manifest(out: Path, command: str, config: dict, seeds: dict, outputs: dict) -> None:
    import scipy

    body = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(json.dumps(config, sort_keys=True, default=_json_default).encode()).hexdigest(),
        "seeds": seeds,
        "versions": {
            "stochbary": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(dumps(body))


# -- generate ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    raw = load_json(args.config) if args.config else {}
    if "command" in raw and "config" in raw:
        raw = raw["config"]
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = InstanceConfig.from_dict(raw)
    inst = generate_instance(cfg, with_diagnostics=not args.no_diagnostics)
    out = output_dir(args.out)
    outputs = {"instance.json": _write(out / "instance.json", json.dumps(inst.to_dict(), default=_json_default))}
    _manifest(out, "generate", cfg.to_dict(), {"seed": cfg.seed}, outputs)
    d = inst.diagnostics
    if d:
        print(f"eps_total = {d['eps_total']:.6g} (se {d['eps_total_se']:.2g}); "
              f"V_hat(mu_bar) = {d['V_hat_mu_bar']:.6g}; radii = {[round(r, 4) for r in d['radii']]}")
    print(f"wrote {out / 'instance.json'}")
    return EXIT_OK


# -- run / distsim coordinator ------------------------------------------------------


def _progress(rec) -> None:
    print(
        f"t={rec.t} R={rec.R:.4g} N={rec.N} theta={rec.theta:.4g} V_hat={rec.V_hat:.6g} "
        f"W2_ref={rec.W2_to_ref:.6g} accept={rec.accept_rate:.4f}",
        flush=True,
    )


def _finish_run(cfg: RunConfig, state, out: Path, command: str) -> None:
    outputs = {
        "trajectory.csv": _write(out / "trajectory.csv", trajectory_csv(state.metrics)),
        "state.json": _write(out / "state.json", json.dumps(state_to_dict(state), default=_json_default)),
    }
    _manifest(out, command, cfg.to_dict(), {"seed": cfg.seed}, outputs)


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    problem, _ = build_problem(cfg)
    state = None
    if args.resume:
        state = state_from_dict(load_json(args.resume))
    out = output_dir(args.out, cfg)
    if state is not None:
        for rec in state.metrics:
            _progress(rec)
    state = run(
        problem, cfg.schedule, cfg.iterations, cfg.eval.per_iteration(), Stream(cfg.seed), base_measure(cfg),
        state=state, progress=_progress,
    )
    _finish_run(cfg, state, out, "run")
    print(f"wrote {out / 'trajectory.csv'}")
    return EXIT_OK


def cmd_coordinator(args) -> int:
    cfg = load_run_config(args.config)
    problem, _ = build_problem(cfg)
    out = output_dir(args.out, cfg)
    common = dict(eval_cfg=cfg.eval.per_iteration(), timeout=args.timeout, base=base_measure(cfg), progress=_progress)
    if args.inprocess:
        state = run_inprocess(problem, cfg.schedule, cfg.iterations, Stream(cfg.seed), mode=args.mode, **common)
    elif args.loopback:
        state = run_loopback_tcp(problem, cfg.schedule, cfg.iterations, Stream(cfg.seed), mode=args.mode, **common)
    else:
        if not args.agents:
            raise ConfigError("give --agents host:port,... or --inprocess or --loopback")
        addresses = args.agents.split(",")
        if len(addresses) != problem.K:
            raise ConfigError(f"need {problem.K} agent addresses, got {len(addresses)}")
        transports = [connect(a, args.mode, timeout=args.timeout) for a in addresses]
        state = coordinator_run(problem, cfg.schedule, cfg.iterations, transports, Stream(cfg.seed), **common)
    _finish_run(cfg, state, out, "distsim coordinator")
    print(f"wrote {out / 'trajectory.csv'}")
    return EXIT_OK


def cmd_agent(args) -> int:
    cfg = load_run_config(args.config)
    problem, _ = build_problem(cfg)
    if not 0 <= args.k < problem.K:
        raise ConfigError(f"agent index {args.k} outside 0..{problem.K - 1}")
    server = listen(args.listen)
    print(f"agent {args.k} listening on {args.listen}", flush=True)
    transport = accept(server, args.mode, timeout=args.timeout)
    server.close()
    code = agent_serve(args.k, problem.inputs[args.k], transport, Stream(cfg.seed), problem.radii[args.k])
    return EXIT_OK if code == 0 else EXIT_PROTOCOL


# -- evaluate ---------------------------------------------------------------------


def _robust(values, trim: float) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if np.all(np.isnan(v)):
        return {"trimmed_mean": None, "iqr": None, "q1": None, "q3": None}
    return trimmed_mean_iqr(v, trim).to_dict()


def summary_schema() -> dict:
    return json.loads((resources.files("stochbary") / "data" / "summary.schema.json").read_text())


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    ev = cfg.eval
    if args.trials is not None or args.n_eval is not None:
        ev = EvalSettings(
            n_eval=ev.n_eval if args.n_eval is None else args.n_eval,
            trials=ev.trials if args.trials is None else args.trials,
            trim=ev.trim,
            timing=ev.timing,
        )
    if ev.n_eval < 1:
        raise ConfigError("evaluation needs n_eval >= 1")
    problem, _ = build_problem(cfg)
    if args.chain == "reference":
        if problem.reference is None:
            raise ConfigError("the problem has no reference measure")
        chain = PushforwardChain(problem.reference, [], [math.inf])
    else:
        chain = state_from_dict(load_json(args.chain)).chain
    out = output_dir(args.out, cfg)
    rows, reference = evaluate_trials(chain, problem, ev.n_eval, ev.trials, Stream(cfg.seed))
    per_t = []
    for t in range(chain.t + 1):
        sel = [r for r in rows if r[1] == t]
        per_t.append({"t": t, "V_hat": _robust([r[2] for r in sel], ev.trim),
                      "W2_ref": _robust([r[3] for r in sel], ev.trim)})
    summary = {
        "n_eval": ev.n_eval,
        "trials": ev.trials,
        "trim": ev.trim,
        "chain_t": chain.t,
        "per_t": per_t,
        "reference": {"V_hat": _robust(reference, ev.trim)},
    }
    jsonschema.validate(summary, summary_schema())
    outputs = {
        "eval.csv": _write(out / "eval.csv", eval_csv(rows)),
        "summary.json": _write(out / "summary.json", dumps(summary)),
    }
    config = {**cfg.to_dict(), "eval": {"n_eval": ev.n_eval, "trials": ev.trials, "trim": ev.trim}, "chain": args.chain}
    _manifest(out, "evaluate", config, {"seed": cfg.seed}, outputs)
    for p in per_t:
        print(f"t={p['t']} V_hat={p['V_hat']['trimmed_mean']} (IQR {p['V_hat']['iqr']}) "
              f"W2_ref={p['W2_ref']['trimmed_mean']}")
    print(f"reference V_hat={summary['reference']['V_hat']['trimmed_mean']}")
    return EXIT_OK


# -- oracle-gaussian --------------------------------------------------------------


def cmd_oracle(args) -> int:
    spec = load_json(args.config)
    try:
        means = [np.asarray(m, dtype=np.float64) for m in spec["means"]]
        covs = [np.asarray(c, dtype=np.float64) for c in spec["covariances"]]
    except KeyError as exc:
        raise ConfigError(f"oracle config needs {exc}") from exc
    K = len(means)
    w = np.asarray(spec.get("weights", [1.0 / K] * K), dtype=np.float64)
    bm, bS = gaussian_barycenter_oracle(means, covs, w)
    pair = {f"{i},{j}": gaussian_w2(means[i], covs[i], means[j], covs[j]) for i in range(K) for j in range(i + 1, K)}
    result = {
        "barycenter_mean": bm,
        "barycenter_cov": bS,
        "pairwise_w2": pair,
        "mean_pairwise_w2": float(np.mean(list(pair.values()))) if pair else 0.0,
        "w2_to_barycenter": [gaussian_w2(bm, bS, m, c) for m, c in zip(means, covs)],
    }
    print(dumps(result))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochbary", description="Stochastic fixed-point W2 barycenter toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a synthetic instance")
    g.add_argument("--config", help="instance generator JSON (defaults when omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--no-diagnostics", action="store_true")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the fixed-point iteration")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--resume", help="state.json of a previous run to continue")
    r.add_argument("--iterations", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="repeated-trial evaluation of a saved chain")
    e.add_argument("--config", required=True)
    e.add_argument("--chain", required=True, help="state.json of a run, or 'reference'")
    e.add_argument("--out")
    e.add_argument("--trials", type=int)
    e.add_argument("--n-eval", type=int)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle-gaussian", help="Gaussian barycenter and W2 values")
    o.add_argument("--config", required=True, help="JSON with means, covariances and optional weights")
    o.set_defaults(func=cmd_oracle)

    d = sub.add_parser("distsim", help="message-passing simulation")
    dsub = d.add_subparsers(dest="role", required=True)
    c = dsub.add_parser("coordinator")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.add_argument("--agents", help="comma-separated host:port list, one per input")
    c.add_argument("--inprocess", action="store_true", help="run the agents as threads")
    c.add_argument("--loopback", action="store_true", help="run the agents as threads on loopback TCP")
    c.add_argument("--mode", choices=("raw", "decimal"), default="raw")
    c.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    c.set_defaults(func=cmd_coordinator)
    a = dsub.add_parser("agent")
    a.add_argument("--config", required=True)
    a.add_argument("--k", type=int, required=True)
    a.add_argument("--listen", required=True, help="host:port")
    a.add_argument("--mode", choices=("raw", "decimal"), default="raw")
    a.add_argument("--timeout", type=float, default=None)
    a.set_defaults(func=cmd_agent)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InstanceConfigError, jsonschema.ValidationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AgentError, ProtocolError, ConnectionError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except IterationError as exc:
        protocol = isinstance(exc.cause, (AgentError, ProtocolError, ConnectionError))
        print(f"{'protocol error' if protocol else 'numerical failure'}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL if protocol else EXIT_NUMERICAL
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
