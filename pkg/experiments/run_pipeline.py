"""
run_pipeline.py

Runs the desk pipeline and the three ablations as subprocesses of the CLI, then
the report over every run. Usage:

    python experiments/run_pipeline.py [base|ablations|all] [--config PATH] [--out DIR] [--seed INT]
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG = ROOT / "configs" / "small.json"

# main pipeline, in dependency order
base_steps = [
    ["gen-data"],
    ["pretrain"],
    ["train"],
    ["boost"],
    ["eval", "--run", "MIRNet", "--run", "MIRNet-Boosting"],
]

# ablations: -C no constraints, -G no GAT, -P no pretraining
ablation_steps = [
    ["train", "--ablate", "C"],
    ["eval", "--ablate", "C"],
    ["train", "--ablate", "G"],
    ["eval", "--ablate", "G"],
    ["train", "--ablate", "P"],
    ["eval", "--ablate", "P"],
]

report_steps = [
    ["report"],
]


def run_steps(steps, label, common, timeout):
    """Run a list of CLI steps and track failures."""
    failed_steps = []

    print(f"\n{'=' * 60}")
    print(f"Running {label} steps...")
    print(f"{'=' * 60}")

    for step in steps:
        name = " ".join(step)
        print(f"\n▶ Running {name}...")
        try:
            result = subprocess.run(
                [sys.executable, "-m", "mirnet.main", *step, *common],
                cwd=str(ROOT),
                capture_output=True,
                text=True,
                timeout=timeout,
            )

            if result.returncode == 0:
                print(f"✓ {name} - COMPLETED")
            else:
                print(f"❌ {name} - FAILED (exit {result.returncode})")
                print("STDERR:", result.stderr)
                failed_steps.append(name)

        except subprocess.TimeoutExpired:
            print(f"❌ {name} - TIMEOUT")
            failed_steps.append(name)
        except OSError as e:
            print(f"❌ {name} - ERROR: {e}")
            failed_steps.append(name)

        if failed_steps and step[0] in ("gen-data", "pretrain", "train"):
            # later steps need this artifact
            break

    return failed_steps


def main():
    p = argparse.ArgumentParser()
    p.add_argument("target", nargs="?", default="all", choices=["base", "ablations", "all"])
    p.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    p.add_argument("--out", type=Path, default=ROOT / "out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=int, default=1800, help="Seconds allowed per step")
    args = p.parse_args()

    common = ["--config", str(args.config), "--out", str(args.out), "--seed", str(args.seed),
              "--log-level", "WARNING"]
    all_failed = []

    if args.target in ["base", "all"]:
        all_failed.extend(run_steps(base_steps, "pipeline", common, args.timeout))

    if args.target in ["ablations", "all"] and not all_failed:
        all_failed.extend(run_steps(ablation_steps, "ablation", common, args.timeout))

    if not all_failed:
        all_failed.extend(run_steps(report_steps, "report", common, args.timeout))

    print("\n" + "=" * 60)
    if not all_failed:
        print(f"✓ All steps completed; tables are in {args.out / 'report'}")
    else:
        print(f"⚠ {len(all_failed)} step(s) failed:")
        for step in all_failed:
            print(f"  - {step}")
    print("=" * 60)
    return 1 if all_failed else 0


if __name__ == "__main__":
    sys.exit(main())
