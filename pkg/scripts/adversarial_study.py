"""Effect of the MMD adversary on target alignment and accuracy."""

import argparse

import numpy as np

from metamoe.experiments import WIDE_TRAIN, adversarial_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--gamma", type=float, default=1.0)
    ap.add_argument("--hidden", type=int, default=WIDE_TRAIN["hidden"])
    args = ap.parse_args()
    rows = adversarial_study(range(args.seeds), args.gamma, dict(WIDE_TRAIN, hidden=args.hidden))
    print(f"{'seed':>4} {'mmd init':>9} {'mmd final':>9} {'moe':>7} {'moe-a':>7}")
    for r in rows:
        print(f"{r.seed:>4} {r.mmd_init:9.4f} {r.mmd_final:9.4f} {r.moe:7.4f} {r.moe_a:7.4f}")
    cols = [np.mean([getattr(r, k) for r in rows]) for k in ("mmd_init", "mmd_final", "moe", "moe_a")]
    print(f"mean {cols[0]:9.4f} {cols[1]:9.4f} {cols[2]:7.4f} {cols[3]:7.4f}")


if __name__ == "__main__":
    main()
