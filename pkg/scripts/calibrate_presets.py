"""Fit noise-preset parameters so the error medians hit the target values.

The samplers draw an angle ~ |N(0, sigma)| whose observed error is that angle
folded into [0, 180] deg; a fraction of edges can instead be uniformly random
(outliers).  Run with ``python scripts/calibrate_presets.py``.
"""

import argparse

import numpy as np
from scipy.optimize import brentq

from viewgraph_refine.synth import HALF_NORMAL_MEDIAN

# (target median, outlier fraction, kind)
TARGETS = {
    "bb-like rotation": (96.48, 0.2, "rot"),
    "bb-like translation": (89.30, 0.2, "dir"),
    "kp-like rotation": (36.26, 0.0, "rot"),
    "kp-like translation": (87.23, 0.0, "dir"),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=2_000_000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n = args.samples
    z = np.abs(rng.normal(size=n))
    u = rng.uniform(size=n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    v = rng.normal(size=(n, 3))
    random_errors = {
        "rot": np.degrees(2 * np.arctan2(np.linalg.norm(q[:, 1:], axis=1), np.abs(q[:, 0]))),
        "dir": np.degrees(np.arccos(v[:, 2] / np.linalg.norm(v, axis=1))),
    }

    def median_error(param, frac, kind):
        theta = z * np.radians(param) / HALF_NORMAL_MEDIAN
        folded = np.degrees(np.abs((theta + np.pi) % (2 * np.pi) - np.pi))
        return np.median(np.where(u < frac, random_errors[kind], folded))

    for name, (target, frac, kind) in TARGETS.items():
        p = brentq(lambda x: median_error(x, frac, kind) - target, 1.0, 180.0, xtol=1e-4)
        print(f"{name:22s} target {target:6.2f}  outliers {frac:.2f}  parameter {p:.2f}")


if __name__ == "__main__":
    main()
