"""Synthetic shifted-Gaussian adaptation: CLCN vs source-only over several seeds.

    python scripts/synthetic_adaptation.py --seeds 0,1,2,3,4
"""

import argparse

import numpy as np

from clcn.experiments import SYNTH_EPISODES, median_final, synthetic_sweep, worker_count


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--episodes", type=int, default=SYNTH_EPISODES)
    parser.add_argument("--workers", type=int, default=worker_count())
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    runs = synthetic_sweep(["clcn", "source-only"], seeds, args.episodes, args.workers)
    print(f"{'variant':<12} {'seed':>4} {'src_acc':>8} {'tgt_acc':>8} {'dist@10%':>9} {'dist':>8}")
    for r in runs:
        print(f"{r.variant:<12} {r.seed:>4} {r.final.src_acc:>8.4f} {r.final.tgt_acc:>8.4f} "
              f"{r.at_fraction(0.1).centroid_dist:>9.3f} {r.final.centroid_dist:>8.3f}")
    gain = median_final(runs, "clcn") - median_final(runs, "source-only")
    ratios = [r.final.centroid_dist / r.at_fraction(0.1).centroid_dist for r in runs if r.variant == "clcn"]
    print(f"median target-accuracy gain: {100 * gain:.1f} points")
    print(f"median CLCN final/10% centroid distance: {np.median(ratios):.3f}")


if __name__ == "__main__":
    main()
