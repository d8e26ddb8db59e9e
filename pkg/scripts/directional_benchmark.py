"""Leave-one-domain-out comparison of the full method, the flags-off baseline and a traditional ensemble.

Runs every (configuration, held-out domain, seed) on the synthetic benchmark,
appends one JSON line per run to ``--out`` and prints per-target summaries
with paired sign counts.

    python3 scripts/directional_benchmark.py --epochs 6 --lr-period 3 --seeds 1,2,3,4,5 --out runs.jsonl
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from triplee.config import RunConfig
from triplee.datakit import generate_synthetic
from triplee.experiment import run_jobs, worker_count

CELLS = {
    "baseline": dict(ereplay_b=False, esaug=False, ereplay_d=False),
    "triplee": dict(ereplay_b=True, esaug=True, ereplay_d=True),
    "traditional": dict(ereplay_b=True, esaug=True, ereplay_d=True, ensemble="traditional"),
}


def ints(text):
    return [int(x) for x in text.split(",") if x]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", default="baseline,triplee,traditional")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--lr-period", type=int, default=3)
    ap.add_argument("--seeds", type=ints, default=[1, 2, 3, 4, 5])
    ap.add_argument("--targets", type=ints, default=[0, 1, 2, 3])
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("directional.jsonl"))
    args = ap.parse_args()

    cells = args.cells.split(",")
    base = RunConfig(seed=0, epochs=args.epochs, lr_period=args.lr_period)
    dataset = generate_synthetic(base.classes, base.per_domain, base.image_size, base.data_seed)
    jobs = [(c, base.replace(seed=s, target_domain=t, **CELLS[c])) for t in args.targets for s in args.seeds
            for c in cells]
    args.out.write_text("")
    start = time.perf_counter()

    def keep(rec):
        rec["elapsed_s"] = round(time.perf_counter() - start, 1)
        with open(args.out, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(json.dumps(rec, sort_keys=True), flush=True)

    records = run_jobs(jobs, dataset, args.workers or worker_count(), keep)
    acc = {(r["cell"], r["target"], r["seed"]): r["acc"] for r in records if "acc" in r}
    print(f"\n{len(records)} runs in {time.perf_counter() - start:.0f}s")
    for c in cells:
        vals = [v for (cc, _, _), v in acc.items() if cc == c]
        print(f"{c:12s} mean {np.mean(vals):6.2f}  " + "  ".join(
            f"t{t} {np.mean([acc[c, t, s] for s in args.seeds if (c, t, s) in acc]):6.2f}" for t in args.targets))
    for c, ref in (("triplee", "baseline"), ("triplee", "traditional")):
        if c in cells and ref in cells:
            for t in args.targets:
                d = [acc[c, t, s] - acc[ref, t, s] for s in args.seeds if (c, t, s) in acc and (ref, t, s) in acc]
                print(f"{c} - {ref} t{t}: mean {np.mean(d):+.2f}  +{sum(x > 0 for x in d)}/-{sum(x < 0 for x in d)}")


if __name__ == "__main__":
    main()
