"""Validation error against message-passing depth, several seeds per depth.

    python scripts/depth_ablation.py --depths 1 2 3 5 --seeds 3 --epochs 10
"""

import argparse
import csv
import sys
import time

import numpy as np

from viewgraph_refine import pipeline, synth
from viewgraph_refine.posernet.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 5])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--preset", choices=sorted(synth.NOISE_PRESETS), default="kp-like")
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--val", type=int, default=50)
    args = ap.parse_args()

    scene, noise = synth.SceneConfig(), synth.NOISE_PRESETS[args.preset]
    trn = pipeline.make_dataset(scene, noise, 0, "train", args.train)
    val = pipeline.make_dataset(scene, noise, 0, "val", args.val)

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["depth", "seed", "best_epoch", "val_rot_deg", "val_tdir_deg", "seconds"])
    means = {}
    for depth in args.depths:
        rows = []
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            res = train(trn, val, TrainConfig(depth=depth, epochs=args.epochs, rng_seed=seed))
            h = res.history[res.best_epoch]
            rows.append(h["median_rot_err_deg"])
            out.writerow([depth, seed, res.best_epoch, f"{h['median_rot_err_deg']:.2f}", f"{h['median_tr_dir_err_deg']:.2f}", f"{time.perf_counter() - t0:.1f}"])
            sys.stdout.flush()
        means[depth] = float(np.mean(rows))
    for depth, m in means.items():
        print(f"# depth {depth}: mean validation rotation median {m:.2f} deg", file=sys.stderr)


if __name__ == "__main__":
    main()
