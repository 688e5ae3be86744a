"""How well does the IoU score separate good pseudo-boxes from bad ones?

Trains a detector through burn-up only, then runs the teacher pipeline on
unlabeled scenes and compares each pseudo-box with the hidden ground truth:
correlation of the IoU score with true IoU, and the survivors' quality as
the IoU threshold rises.

    python scripts/pseudo_label_diagnostics.py --iters 1000 --scenes 300
"""
import argparse
from dataclasses import replace

import numpy as np
import torch

from ilnet.eval_analysis import pseudo_label_quality
from ilnet.synthdata import DataConfig, make_splits
from ilnet.trainer import HyperConfig, generate_pseudo_labels, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--scenes", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--delta", type=float, default=HyperConfig.delta, help="confidence threshold")
    args = ap.parse_args()
    torch.set_num_threads(1)

    data = make_splits(DataConfig(seed=args.seed))
    cfg = HyperConfig(seed=args.seed, total_iters=args.iters, burn_up_iters=args.iters,
                      log_interval=args.iters)
    model = run_training(cfg, data).student
    scenes = data.unlabeled[: args.scenes]
    pseudo, _ = generate_pseudo_labels(model, np.stack([s.image for s in scenes]),
                                       replace(cfg, theta=0.0, delta=args.delta))
    rows = np.array([(v, wrong, p.q_iou)
                     for pls, s in zip(pseudo, scenes)
                     for (v, wrong), p in zip(pseudo_label_quality(pls, s.reveal()), pls)], dtype=float)
    if len(rows) == 0:
        print("no pseudo-labels above the confidence threshold")
        return
    print(f"{len(rows)} pseudo-labels at delta={args.delta}; corr(q, IoU) = "
          f"{np.corrcoef(rows[:, 2], rows[:, 0])[0, 1]:.3f}")
    print("theta  kept  mean IoU  IoU>0.75  IoU>0.9  wrong class")
    for theta in (0.0, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        k = rows[:, 2] >= theta
        if k.any():
            print(f"{theta:5.1f}  {k.sum():4d}  {rows[k, 0].mean():8.3f}  {np.mean(rows[k, 0] > 0.75):8.3f}"
                  f"  {np.mean(rows[k, 0] > 0.9):7.3f}"
                  f"  {rows[k, 1].mean():11.3f}")


if __name__ == "__main__":
    main()
