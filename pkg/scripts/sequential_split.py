"""Two split-class tasks learned in sequence, with and without distillation.

Prints the old task's top-level accuracy at the snapshot and after the second
phase, per seed, for both variants.
"""

import argparse

import numpy as np

from dvn.experiments import SplitForgetting


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--phase1-epochs", type=int, default=50)
    p.add_argument("--phase2-epochs", type=int, default=200)
    p.add_argument("--temperature", type=float, default=2.0)
    args = p.parse_args()
    print("seed  variant        snapshot  final   drop")
    drops = {True: [], False: []}
    for seed in args.seeds:
        exp = SplitForgetting(seed, phase1_epochs=args.phase1_epochs, phase2_epochs=args.phase2_epochs,
                              temperature=args.temperature)
        for distill in (True, False):
            before, after = exp.run(distill)
            drops[distill].append(before - after)
            name = "distillation" if distill else "no distill"
            print(f"{seed:>4}  {name:<13} {before:8.3f} {after:7.3f} {before - after:6.3f}")
    print(f"mean drop: distillation {np.mean(drops[True]):.3f}, without {np.mean(drops[False]):.3f}")


if __name__ == "__main__":
    main()
