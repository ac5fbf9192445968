"""MoE against the uni-MS and best-SS baselines on the synthetic three-domain task."""

import argparse

import numpy as np

from metamoe.experiments import compare_baselines


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--hidden", type=int, default=None, help="encoder width (default: the acceptance setting)")
    args = ap.parse_args()
    train = {} if args.hidden is None else {"hidden": args.hidden}
    rows = compare_baselines(range(args.seeds), train=train)
    print(f"{'seed':>4} {'moe':>7} {'uni-ms':>7} {'best-ss':>7}  mean alpha")
    for r in rows:
        alpha = " ".join(f"{a:.2f}" for a in r.mean_alpha)
        print(f"{r.seed:>4} {r.moe:7.4f} {r.uni_ms:7.4f} {r.best_ss:7.4f}  {alpha}")
    moe, uni, best = (np.mean([getattr(r, k) for r in rows]) for k in ("moe", "uni_ms", "best_ss"))
    print(f"mean {moe:7.4f} {uni:7.4f} {best:7.4f}")
    print(f"margin over uni-MS {100 * (moe - uni):+.2f} points, over best-SS {100 * (moe - best):+.2f} points")


if __name__ == "__main__":
    main()
