"""Accuracy as a random-label outlier source grows from nothing to three domains' worth."""

import argparse

import numpy as np

from metamoe.experiments import SYNTH, WIDE_TRAIN, outlier_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--multiples", default="0,1,2,3")
    ap.add_argument("--hidden", type=int, default=WIDE_TRAIN["hidden"])
    args = ap.parse_args()
    multiples = [int(m) for m in args.multiples.split(",")]
    rows = outlier_study(range(args.seeds), multiples, dict(WIDE_TRAIN, hidden=args.hidden))
    base = {k: np.mean([getattr(r, k) for r in rows if r.multiple == multiples[0]]) for k in ("moe", "uni_ms")}
    print(f"{'outlier n':>9} {'moe':>7} {'uni-ms':>7} {'moe drop':>9} {'uni drop':>9} {'alpha':>6}")
    for m in multiples:
        sel = [r for r in rows if r.multiple == m]
        moe = np.mean([r.moe for r in sel])
        uni = np.mean([r.uni_ms for r in sel])
        alpha = np.mean([r.outlier_alpha for r in sel]) if m else float("nan")
        print(f"{m * SYNTH['per_domain_n']:>9} {moe:7.4f} {uni:7.4f} {100 * (base['moe'] - moe):+9.2f} {100 * (base['uni_ms'] - uni):+9.2f} {alpha:6.3f}")


if __name__ == "__main__":
    main()
