#!/usr/bin/env python3
"""Compare probe-phrase sets by the transfer they buy the trained patch.

Trains one patch per probe set (combined / action-verbs-only /
spatial-words-only) at the same seed and reports the victim-side feature
and action deviations against the shared random-patch baseline.

Usage: python scripts/probe_set_sweep.py [--seed N]
"""

import argparse
import sys

from patchlab.analysis import transfer_eval
from patchlab.attack import run_upa_rfas
from patchlab.config import resolve
from patchlab.datagen import generate_dataset
from patchlab.losses import probe_anchors
from patchlab.policy import build_policy


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    base = resolve({"attack.seed": str(args.seed)})
    surrogate = build_policy(base.surrogate, "surrogate")
    victim = build_policy(base.victim, "victim")
    dataset = generate_dataset(base.dataset_count, base.dataset_seed)
    eval_set = generate_dataset(base.eval_count, base.eval_seed)

    print(f"seed {args.seed}: feature_dev / action_dev on the held-out victim")
    for probe_set in ("combined", "action", "direction"):
        cfg = resolve({"attack.seed": str(args.seed), "probes.set": probe_set})
        anchors = probe_anchors(surrogate, cfg.probe_phrases)
        patch, _ = run_upa_rfas(dataset, surrogate, cfg.attack, probes=anchors)
        metrics = transfer_eval(
            patch,
            victim,
            eval_set,
            n_placements=cfg.eval_placements,
            seed=cfg.eval_seed,
            limits=cfg.attack.limits,
        )
        learned = metrics.arms["learned"]
        random_arm = metrics.arms["random"]
        # probe choice moves the objective only through the (small) semantic
        # term, so differences show up in the far decimals at this scale
        print(
            f"  {probe_set:>9}: {learned.mean_feature_dev:.6f} / "
            f"{learned.mean_action_dev:.6f}   (random baseline "
            f"{random_arm.mean_feature_dev:.6f} / {random_arm.mean_action_dev:.6f})"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
