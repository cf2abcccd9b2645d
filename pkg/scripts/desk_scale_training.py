"""Desk-scale learning check: REINFORCE and PPO on 6x3 SD1 for several seeds.

For each seed, trains both algorithms under the same budget, then compares
greedy decoding of the best-by-validation model on 100 held-out test
instances against the uniform-random policy and the four dispatching rules.

    python3 scripts/desk_scale_training.py --seeds 1 2 3 --out runs/desk
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

from fjsp_rl.desk import run_desk_check


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--algorithms", nargs="+", default=["reinforce", "ppo"])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        res = run_desk_check(seed, epochs=args.epochs, algorithms=tuple(args.algorithms),
                             out_dir=os.path.join(args.out, f"seed{seed}"), log=print)
        res["wall_time"] = time.perf_counter() - t0
        results.append(res)
        print(json.dumps(res, indent=1), flush=True)
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
