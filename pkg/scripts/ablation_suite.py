"""Run the built-in ablation matrices one after another through the CLI.

Each matrix writes runs.jsonl, report.csv and report.md under
``<out>/<matrix>/``. Short schedules are the practical choice on a laptop:

    python3 scripts/ablation_suite.py --matrices components,m --epochs 6 --seeds 1,2,3 --out ablations
"""

import argparse
import sys
from pathlib import Path

from triplee.cli import main as cli_main
from triplee.experiment import MATRICES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--matrices", default=",".join(MATRICES))
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--lr-period", type=int, default=3)
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--targets", default="0,1,2,3")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", type=Path, default=Path("ablations"))
    args = ap.parse_args()

    status = 0
    for name in args.matrices.split(","):
        argv = ["ablate", "--matrix", name, "--seeds", args.seeds, "--targets", args.targets,
                "--set", f"epochs={args.epochs}", "--set", f"lr_period={args.lr_period}",
                "--out", str(args.out / name)]
        if args.workers:
            argv += ["--workers", str(args.workers)]
        print(f"== {name}", flush=True)
        status = max(status, cli_main(argv))
    return status


if __name__ == "__main__":
    sys.exit(main())
