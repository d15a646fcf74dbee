#!/usr/bin/env python3
"""Rolling weight averaging on a constant-LR trunk versus cooldown branches.

Compares the low-bit quantized validation CE of averaged checkpoints
against matched-step cooldowns.
"""

import argparse
import logging

from qlab.experiments import lawa_vs_cooldown


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out-root", default="runs/lawa")
    ap.add_argument("--profile", choices=("desk", "tiny"), default="desk")
    ap.add_argument("--trunk-steps", type=int, default=None)
    ap.add_argument("--compare-steps", type=int, nargs="+", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--bits", type=int, default=3)
    ap.add_argument("--k", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trunk = args.trunk_steps or (30000 if args.profile == "desk" else 1200)
    compare = args.compare_steps or (
        [20000, 30000] if args.profile == "desk" else [800, 1200]
    )
    results = lawa_vs_cooldown(
        args.corpus, args.out_root, profile=args.profile,
        trunk_steps=trunk, compare_steps=compare, seeds=args.seeds,
        bits=args.bits, k=args.k,
    )
    wins = 0
    for r in results:
        print(
            f"seed {r.seed} step {r.step}: lawa ce_q{args.bits} {r.lawa_ce_q:.4f} vs "
            f"cooldown {r.branch_ce_q:.4f} "
            f"({'lawa matches/beats' if r.lawa_matches_or_beats else 'cooldown wins'})"
        )
        wins += r.lawa_matches_or_beats
    print(f"{wins}/{len(results)} comparisons favor weight averaging")


if __name__ == "__main__":
    main()
