"""Robust vs single-pass motion averaging over a sweep of outlier fractions.

    python scripts/irls_robustness.py --nodes 16 --noise 5 --fractions 0 0.1 0.2 0.3
"""

import argparse

import numpy as np

from viewgraph_refine import eig, metrics, synth


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=16)
    ap.add_argument("--noise", type=float, default=5.0, help="inlier rotation and direction noise, deg")
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3])
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()

    print(f"{'outliers':>8} {'irls':>8} {'single':>8} {'ratio':>6} {'converged':>9}")
    for frac in args.fractions:
        noise = synth.NoiseModel(args.noise, args.noise, outlier_edge_fraction=frac)
        robust, plain, converged = [], [], 0
        for seed in range(args.seeds):
            g = synth.generate_graph(synth.SceneConfig(num_cameras=args.nodes, rng_seed=seed))
            noisy = synth.corrupt_edges(g, noise, seed)
            gt = [g.ground_truth[n] for n in g.node_ids]
            res = eig.irls_motion_average(noisy)
            converged += res.converged
            robust.extend(metrics.absolute_errors(metrics.align_rotations(res.poses, gt), gt)[0])
            plain.extend(metrics.absolute_errors(metrics.align_rotations(eig.single_pass(noisy), gt), gt)[0])
        a, b = metrics.lower_median(robust), metrics.lower_median(plain)
        print(f"{frac:8.2f} {a:8.2f} {b:8.2f} {a / b if b > 0 else np.nan:6.2f} {converged:>5}/{args.seeds}")


if __name__ == "__main__":
    main()
