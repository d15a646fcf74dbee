#!/usr/bin/env python3
"""Peak-LR sweep under a fixed WSD budget.

Reports the final low-bit relative quantization error per learning rate
and whether the ordering is inverse in rate magnitude.
"""

import argparse
import logging

from qlab.experiments import lr_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out-root", default="runs/lr_sweep")
    ap.add_argument("--profile", choices=("desk", "tiny"), default="desk")
    ap.add_argument("--total-steps", type=int, default=None)
    ap.add_argument("--lrs", type=float, nargs="+", default=[3e-4, 1e-3, 3e-3])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--bits", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    total = args.total_steps or (30000 if args.profile == "desk" else 1200)
    result = lr_sweep(
        args.corpus, args.out_root, profile=args.profile,
        total_steps=total, lrs=args.lrs, seeds=args.seeds, bits=args.bits,
    )
    inverse = 0
    lrs = sorted(args.lrs)
    for seed, per_lr in result.items():
        errs = [per_lr[lr] for lr in lrs]
        ordered = all(errs[i] >= errs[i + 1] for i in range(len(errs) - 1))
        inverse += ordered
        pretty = ", ".join(f"{lr:.0e}: {e:.4f}" for lr, e in zip(lrs, errs))
        print(f"seed {seed}: rel_err{args.bits} by lr {{{pretty}}} inverse-ordered={ordered}")
    print(f"{inverse}/{len(result)} seeds inversely ordered by learning rate")


if __name__ == "__main__":
    main()
