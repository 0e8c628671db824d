"""Regenerate the packaged 2-d instance (K = K_tilde = 5, Gaussian-mixture reference).

Usage: python scripts/make_shipped_instance.py [--check]

With ``--check`` the instance is rebuilt and compared with the packaged file
instead of overwriting it.
"""

import argparse
import json
import sys
from pathlib import Path

from stochbary.cli import _json_default
from stochbary.instance_gen import InstanceConfig, generate_instance

TARGET = Path(__file__).resolve().parents[1] / "src" / "stochbary" / "data" / "instance_2d.json"
CONFIG = InstanceConfig(d=2, K=5, K_tilde=5, seed=2024, diag_M=200_000, n_ref=2000)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check", action="store_true")
    args = parser.parse_args()
    text = json.dumps(generate_instance(CONFIG).to_dict(), default=_json_default)
    if args.check:
        same = TARGET.read_text() == text
        print("packaged instance is up to date" if same else "packaged instance differs")
        return 0 if same else 1
    TARGET.write_text(text)
    d = json.loads(text)["diagnostics"]
    print(f"eps_total={d['eps_total']:.4g} se={d['eps_total_se']:.2g} V_hat(mu_bar)={d['V_hat_mu_bar']:.4g} "
          f"radii={d['radii']} rejection={d['rejection_ratio']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
