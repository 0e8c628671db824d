import json
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from stochbary.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PROTOCOL, main, summary_schema
from stochbary.evaluation import gaussian_barycenter_oracle, gaussian_w2
from stochbary.instance_gen import Instance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL_INSTANCE = {"K": 3, "K_tilde": 2, "n_aux": 200, "diag_M": 20_000, "n_ref": 300, "seed": 1}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def tiny_run_config(tmp_path, **over):
    cfg = {
        "seed": 3,
        "instance": "shipped",
        "schedule": {"N0": 150, "probe_size": 2000},
        "iterations": 2,
        "eval": {"n_eval": 200, "trials": 4, "timing": False},
    }
    cfg.update(over)
    return write(tmp_path / "run.json", cfg)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestGenerate:
    def test_deterministic(self, tmp_path):
        cfg = write(tmp_path / "gen.json", SMALL_INSTANCE)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--no-diagnostics"]) == EXIT_OK
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--no-diagnostics"]) == EXIT_OK
        a = (tmp_path / "a" / "instance.json").read_bytes()
        assert a == (tmp_path / "b" / "instance.json").read_bytes()
        Instance.from_dict(json.loads(a))

    def test_manifest_replays(self, tmp_path):
        cfg = write(tmp_path / "gen.json", SMALL_INSTANCE)
        main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--no-diagnostics"])
        manifest = str(tmp_path / "a" / "manifest.json")
        assert main(["generate", "--config", manifest, "--out", str(tmp_path / "b"), "--no-diagnostics"]) == EXIT_OK
        assert (tmp_path / "a" / "instance.json").read_bytes() == (tmp_path / "b" / "instance.json").read_bytes()

    def test_diagnostics_recorded(self, tmp_path, capsys):
        cfg = write(tmp_path / "gen.json", SMALL_INSTANCE)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
        diag = json.loads((tmp_path / "a" / "instance.json").read_text())["diagnostics"]
        assert diag["eps_total"] >= 0
        assert "eps_total" in capsys.readouterr().out

    def test_not_surjective_is_config_error(self, tmp_path, capsys):
        cfg = write(tmp_path / "gen.json", {**SMALL_INSTANCE, "phi_positive": [0, 1], "phi_negative": [1, 0]})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
        assert "surjective" in capsys.readouterr().err

    def test_affine_sum_violation(self, tmp_path, capsys):
        A = [np.eye(2).tolist()] * 3
        b = [[0.0, 0.0], [0.0, 0.0], [3e-3, 0.0]]  # weighted sum off by 1e-3
        cfg = write(tmp_path / "gen.json", {**SMALL_INSTANCE, "gamma": 0.3, "A": A, "b": b})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
        assert "b" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = write(tmp_path / "gen.json", {"bogus": 1})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_CONFIG


class TestRun:
    def test_writes_outputs(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", tiny_run_config(tmp_path), "--out", str(out)]) == EXIT_OK
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert len(lines) == 1 + 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == {"seed": 3}
        assert {"config_sha256", "versions", "outputs"} <= set(manifest)

    def test_missing_instance_path(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path, instance="nowhere/instance.json")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "nowhere" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_seed_required(self, tmp_path):
        cfg = write(tmp_path / "c.json", {"instance": "shipped"})
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_numerical_failure_code(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path, schedule={"N0": 100, "probe_size": 1000, "sinkhorn_tol": 1e-15,
                                                  "sinkhorn_max_iter": 1})
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
        assert "t=0" in capsys.readouterr().err

    def test_resume_is_exact(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        main(["run", "--config", cfg, "--out", str(tmp_path / "full")])
        main(["run", "--config", cfg, "--out", str(tmp_path / "first"), "--iterations", "1"])
        main(["run", "--config", cfg, "--out", str(tmp_path / "rest"), "--iterations", "1",
              "--resume", str(tmp_path / "first" / "state.json")])
        full = (tmp_path / "full" / "trajectory.csv").read_bytes()
        assert full == (tmp_path / "rest" / "trajectory.csv").read_bytes()
        assert (tmp_path / "full" / "state.json").read_bytes() == (tmp_path / "rest" / "state.json").read_bytes()

    def test_manifest_rerun_is_bit_identical(self, tmp_path):
        main(["run", "--config", tiny_run_config(tmp_path), "--out", str(tmp_path / "a")])
        assert main(["run", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
        for name in ("trajectory.csv", "state.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_output_root_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STOCHBARY_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["run", "--config", tiny_run_config(tmp_path, iterations=1), "--out", "rel"]) == EXIT_OK
        assert (tmp_path / "root" / "rel" / "trajectory.csv").is_file()

    def test_floats_have_17_digits(self, tmp_path):
        main(["run", "--config", tiny_run_config(tmp_path, iterations=1), "--out", str(tmp_path / "o")])
        rows = (tmp_path / "o" / "trajectory.csv").read_text().splitlines()
        header, row = rows[0].split(","), rows[-1].split(",")
        v = row[header.index("V_hat")]
        assert float(format(float(v), ".17g")) == float(v) and len(v.replace(".", "").lstrip("0")) >= 15

    def test_smoke_config_under_a_minute(self, tmp_path):
        start = time.perf_counter()
        assert main(["run", "--config", str(CONFIGS / "smoke.json"), "--out", str(tmp_path / "smoke")]) == EXIT_OK
        assert time.perf_counter() - start < 60


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("eval")
    cfg = tiny_run_config(tmp)
    assert main(["run", "--config", cfg, "--out", str(tmp / "run")]) == EXIT_OK
    return tmp, cfg


class TestEvaluate:
    def test_summary_schema(self, run_dir):
        tmp, cfg = run_dir
        before = (tmp / "run" / "state.json").read_bytes()
        assert main(["evaluate", "--config", cfg, "--chain", str(tmp / "run" / "state.json"),
                     "--out", str(tmp / "ev")]) == EXIT_OK
        summary = json.loads((tmp / "ev" / "summary.json").read_text())
        jsonschema.validate(summary, summary_schema())
        assert [p["t"] for p in summary["per_t"]] == [0, 1, 2]
        assert (tmp / "run" / "state.json").read_bytes() == before

    def test_schema_rejects_bad_summary(self):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate({"n_eval": 10, "trials": 3, "trim": 0.1, "per_t": [], "reference": {}},
                                summary_schema())

    def test_trials_minimum(self, run_dir, capsys):
        tmp, cfg = run_dir
        code = main(["evaluate", "--config", cfg, "--chain", str(tmp / "run" / "state.json"),
                     "--out", str(tmp / "ev3"), "--trials", "3"])
        assert code == EXIT_CONFIG
        assert "4" in capsys.readouterr().err

    def test_self_evaluation_matches_reference(self, tmp_path):
        cfg = tiny_run_config(tmp_path, eval={"n_eval": 500, "trials": 8})
        assert main(["evaluate", "--config", cfg, "--chain", "reference", "--out", str(tmp_path / "ev")]) == 0
        s = json.loads((tmp_path / "ev" / "summary.json").read_text())
        own, ref = s["per_t"][0]["V_hat"], s["reference"]["V_hat"]
        assert abs(own["trimmed_mean"] - ref["trimmed_mean"]) <= max(own["iqr"], ref["iqr"])

    def test_missing_chain_file(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        assert main(["evaluate", "--config", cfg, "--chain", str(tmp_path / "x.json"),
                     "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestOracle:
    def test_prints_barycenter(self, capsys):
        assert main(["oracle-gaussian", "--config", str(CONFIGS / "oracle_gaussians.json")]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        spec = json.loads((CONFIGS / "oracle_gaussians.json").read_text())
        m, S = gaussian_barycenter_oracle(spec["means"], spec["covariances"], [1 / 3] * 3)
        np.testing.assert_allclose(out["barycenter_cov"], S, rtol=1e-14)
        np.testing.assert_allclose(out["barycenter_mean"], m, rtol=1e-14)
        w01 = gaussian_w2(spec["means"][0], spec["covariances"][0], spec["means"][1], spec["covariances"][1])
        assert out["pairwise_w2"]["0,1"] == pytest.approx(w01, rel=1e-14)

    def test_missing_field(self, tmp_path):
        assert main(["oracle-gaussian", "--config", write(tmp_path / "o.json", {"means": [[0.0]]})]) == EXIT_CONFIG


class TestDistsim:
    def test_coordinator_inprocess_matches_run(self, tmp_path):
        cfg = tiny_run_config(tmp_path)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "serial")]) == EXIT_OK
        assert main(["distsim", "coordinator", "--config", cfg, "--inprocess", "--out", str(tmp_path / "d")]) == 0
        for name in ("trajectory.csv", "state.json"):
            assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "d" / name).read_bytes()

    def test_agents_over_tcp(self, tmp_path):
        cfg = tiny_run_config(tmp_path, iterations=1)
        ports = [free_port() for _ in range(5)]
        codes = {}

        def agent(k):
            codes[k] = main(["distsim", "agent", "--config", cfg, "--k", str(k), "--listen", f"127.0.0.1:{ports[k]}",
                             "--timeout", "60"])

        threads = [threading.Thread(target=agent, args=(k,), daemon=True) for k in range(5)]
        for th in threads:
            th.start()
        time.sleep(0.5)
        agents = ",".join(f"127.0.0.1:{p}" for p in ports)
        assert main(["distsim", "coordinator", "--config", cfg, "--agents", agents, "--out", str(tmp_path / "d")]) == 0
        for th in threads:
            th.join(30)
        assert codes == {k: EXIT_OK for k in range(5)}
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "serial")]) == EXIT_OK
        assert (tmp_path / "serial" / "trajectory.csv").read_bytes() == (tmp_path / "d" / "trajectory.csv").read_bytes()

    def test_unreachable_agent_is_protocol_error(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path, iterations=1)
        agents = ",".join(f"127.0.0.1:{free_port()}" for _ in range(5))
        code = main(["distsim", "coordinator", "--config", cfg, "--agents", agents, "--timeout", "2",
                     "--out", str(tmp_path / "d")])
        assert code == EXIT_PROTOCOL
        assert "protocol error" in capsys.readouterr().err

    def test_wrong_agent_count(self, tmp_path):
        cfg = tiny_run_config(tmp_path, iterations=1)
        assert main(["distsim", "coordinator", "--config", cfg, "--agents", "127.0.0.1:1",
                     "--out", str(tmp_path / "d")]) == EXIT_CONFIG

    def test_agent_index_range(self, tmp_path):
        cfg = tiny_run_config(tmp_path, iterations=1)
        assert main(["distsim", "agent", "--config", cfg, "--k", "9", "--listen", "127.0.0.1:0"]) == EXIT_CONFIG


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stochbary.cli", "run", "--config", str(tmp_path / "none.json"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
