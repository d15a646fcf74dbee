#!/usr/bin/env python3
"""Constant-LR trunk with cooldown branches at several points.

For each branch the script reports whether validation CE improved while
the low-bit relative quantization error rose, relative to the trunk at
the branch point. The desk profile is a multi-hour workstation job; the
tiny profile finishes in minutes.
"""

import argparse
import logging

from qlab.experiments import cooldown_branching


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out-root", default="runs/cooldown")
    ap.add_argument("--profile", choices=("desk", "tiny"), default="desk")
    ap.add_argument("--trunk-steps", type=int, default=None)
    ap.add_argument("--branch-steps", type=int, nargs="+", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--bits", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trunk = args.trunk_steps or (30000 if args.profile == "desk" else 1200)
    branches = args.branch_steps or (
        [10000, 20000, 30000] if args.profile == "desk" else [400, 800, 1200]
    )
    results = cooldown_branching(
        args.corpus, args.out_root, profile=args.profile,
        trunk_steps=trunk, branch_steps=branches, seeds=args.seeds, bits=args.bits,
    )
    both = 0
    for r in results:
        print(
            f"seed {r.seed} branch {r.branch_step}: "
            f"val_ce {r.trunk_ce:.4f} -> {r.branch_ce:.4f} "
            f"({'improves' if r.loss_improves else 'worsens'}), "
            f"rel_err{args.bits} {r.trunk_rel_err:.4f} -> {r.branch_rel_err:.4f} "
            f"({'rises' if r.quant_error_rises else 'falls'})"
        )
        both += r.loss_improves and r.quant_error_rises
    print(f"{both}/{len(results)} branches show loss improving while quantization error rises")


if __name__ == "__main__":
    main()
