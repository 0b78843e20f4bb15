"""MNIST -> USPS at desk scale: CLCN vs source-only.

Needs the IDX files written by prepare_digits.py (in data/digits or $CLCN_DIGITS_DIR).

    python scripts/digits.py --seeds 0,1,2
"""

import argparse

from clcn.experiments import digits_dir, digits_sweep, median_final, worker_count


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--episodes", type=int, default=3000)
    parser.add_argument("--dir", default=None, help=f"IDX directory (default {digits_dir()})")
    parser.add_argument("--workers", type=int, default=worker_count())
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    runs = digits_sweep(["clcn", "source-only"], seeds, args.episodes, args.workers, args.dir)
    for r in runs:
        print(f"{r.variant:<12} seed {r.seed}  src {r.final.src_acc:.4f}  tgt {r.final.tgt_acc:.4f}  ({r.wall_time:.0f}s)")
    gain = median_final(runs, "clcn") - median_final(runs, "source-only")
    print(f"median target-accuracy gain: {100 * gain:.1f} points")


if __name__ == "__main__":
    main()
