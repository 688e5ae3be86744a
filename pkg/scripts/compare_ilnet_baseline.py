"""Train the IL-net and baseline desk configurations over several seeds and
print the per-seed teacher mAP and the gain.

    python scripts/compare_ilnet_baseline.py --out runs/compare --seeds 0 1 2
"""
import argparse
from pathlib import Path

import numpy as np

from ilnet.cli import execute_run
from ilnet.config import load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iters", type=int, help="shorten every run to this many iterations")
    args = ap.parse_args()

    arms = {"baseline": load_config(CONFIGS / "baseline.cfg"), "ilnet": load_config(CONFIGS / "desk.cfg")}
    if args.iters is not None:
        arms = {k: v.with_overrides({"total_iters": args.iters}) for k, v in arms.items()}
    results = {}
    for seed in args.seeds:
        for name, cfg in arms.items():
            rep = execute_run(cfg.with_seed(seed), Path(args.out) / name / f"seed{seed}")
            results[(seed, name)] = rep
            print(f"seed {seed} {name:8s} AP {100 * rep.mAP:6.2f}  AP50 {100 * rep.AP50:6.2f}  "
                  f"AP75 {100 * rep.AP75:6.2f}", flush=True)
    gains = [results[(s, "ilnet")].mAP - results[(s, "baseline")].mAP for s in args.seeds]
    print("gain per seed (AP points):", " ".join(f"{100 * g:+.2f}" for g in gains))
    print(f"mean gain {100 * np.mean(gains):+.2f}, IL-net ahead on {sum(g > 0 for g in gains)}/{len(gains)} seeds")


if __name__ == "__main__":
    main()
