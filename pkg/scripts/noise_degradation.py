"""Machine-level accuracy with and without background benignware.

Trains the machine-level model on paired campaigns (same seed, background
processes off and on) and prints the mean accuracy over the first N seconds.

    python3 scripts/noise_degradation.py --seeds 0 1 2 --repetitions 10
"""

import numpy as np

from _common import base_parser, mean_curve, setup


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--window", type=int, default=20, help="average accuracy over t = 1..window")
    args = p.parse_args()
    setup(args)
    print("seed,accuracy_quiet,accuracy_noisy,drop")
    drops = []
    for seed in args.seeds:
        quiet = np.mean([r.accuracy for r in mean_curve(args, "machine", seed, noise=False)[: args.window]])
        noisy = np.mean([r.accuracy for r in mean_curve(args, "machine", seed, noise=True)[: args.window]])
        drops.append(quiet - noisy)
        print(f"{seed},{quiet:.2f},{noisy:.2f},{quiet - noisy:.2f}", flush=True)
    print(f"mean,,,{np.mean(drops):.2f}")


if __name__ == "__main__":
    main()
