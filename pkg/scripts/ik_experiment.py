"""Train the SAC reaching policy for one gripper and compare it with the
untrained policy and the optimization oracle on workspace-sampled targets.

    python3 scripts/ik_experiment.py --gripper jaw2 --epochs 100
"""
import argparse
import time

import numpy as np

from wsgrasp.grippers import get_gripper
from wsgrasp.ik import IkEnv, SacAgent, SacConfig, evaluate_policy, ik_oracle
from wsgrasp.pipeline import train_policy, workspace_targets


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gripper", default="jaw2")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--her", type=int, default=2)
    ap.add_argument("--targets", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--L", type=int, default=4096)
    a = ap.parse_args()
    g = get_gripper(a.gripper)
    t0 = time.time()
    agent, run, sampler = train_policy(g, a.epochs, a.seed, a.L, a.her)
    env = IkEnv(g, sampler)
    targets = workspace_targets(sampler, a.targets, a.seed + 1000)
    untrained = SacAgent(env.obs_dim, env.space.dim, SacConfig(), a.seed)
    e0 = evaluate_policy(untrained, env, targets).mean()
    e1 = evaluate_policy(agent, env, targets).mean()
    oracle = max(ik_oracle(g, t, seed=i)[1] for i, t in enumerate(targets))
    print(f"{g.name}: untrained {1000 * e0:.2f} mm, trained {1000 * e1:.2f} mm, "
          f"reduction {100 * (1 - e1 / e0):.1f}%, worst oracle residual {1000 * oracle:.4f} mm, "
          f"{time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
