"""All five training variants on the synthetic pair, median final target accuracy.

    python scripts/ablation.py --seeds 0,1,2,3,4
"""

import argparse

from clcn.experiments import SYNTH_EPISODES, median_final, synthetic_sweep, worker_count
from clcn.trainer import VARIANTS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--episodes", type=int, default=SYNTH_EPISODES)
    parser.add_argument("--workers", type=int, default=worker_count())
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    runs = synthetic_sweep(VARIANTS, seeds, args.episodes, args.workers)
    for variant in VARIANTS:
        accs = " ".join(f"{r.final.tgt_acc:.3f}" for r in runs if r.variant == variant)
        print(f"{variant:<20} median {median_final(runs, variant):.4f}   per seed {accs}")


if __name__ == "__main__":
    main()
