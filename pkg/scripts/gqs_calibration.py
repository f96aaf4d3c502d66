"""Compare the GQS threshold rule with the force-closure oracle on random
contact triples sampled from the built-in primitives.

    python3 scripts/gqs_calibration.py --sets 500 --eps 0.01
"""
import argparse

import numpy as np

from wsgrasp.geom3d import sample_surface
from wsgrasp.pipeline import TRIAL_PRIMITIVES
from wsgrasp.primitives import make_primitive
from wsgrasp.quality import FrictionModel, calibrate_threshold, force_closure_oracle, gqs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sets", type=int, default=500)
    ap.add_argument("--eps", type=float, default=0.01)
    ap.add_argument("--mu", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    friction = FrictionModel(mu=a.mu)
    scores, verdicts = [], []
    for i in range(a.sets):
        kind, dims = TRIAL_PRIMITIVES[i % len(TRIAL_PRIMITIVES)]
        cloud = sample_surface(make_primitive(kind, dims), 512, a.seed + i)
        idx = rng.choice(len(cloud), 3, replace=False)
        center = cloud.points.mean(axis=0)
        scores.append(gqs(cloud.points[idx], center, a.eps))
        verdicts.append(force_closure_oracle(cloud.points[idx], cloud.normals[idx], friction, center))
    for line in calibrate_threshold(scores, verdicts).lines():
        print(line)
    s, v = np.array(scores), np.array(verdicts)
    print(f"mean gqs: force closure {s[v].mean():.4f}, not force closure {s[~v].mean():.4f}")


if __name__ == "__main__":
    main()
