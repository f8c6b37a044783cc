"""Per-second process-level (Complete) vs machine-level comparison.

Writes one comparison table per seed and prints the summary deltas.

    python3 scripts/process_vs_machine.py --seeds 0 --out-dir results/
"""

from pathlib import Path

from _common import base_parser, mean_curve, setup
from procsight.evaluation import compare_levels
from procsight.features import COMPLETE


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--out-dir", default=None, help="write comparison_seed<N>.csv files here")
    args = p.parse_args()
    setup(args)
    print("seed,min_f1_delta,mean_f1_delta,mean_recall_delta,max_process_fpr,max_machine_fpr")
    for seed in args.seeds:
        cmp = compare_levels(mean_curve(args, "machine", seed), mean_curve(args, COMPLETE, seed))
        min_f1 = min(r["f1_delta"] for r in cmp.rows)
        print(f"{seed},{min_f1:.4f},{cmp.mean_f1_delta:.4f},{cmp.mean_recall_delta:.4f},"
              f"{cmp.max_process_fpr:.4f},{cmp.max_machine_fpr:.4f}", flush=True)
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"comparison_seed{seed}.csv").write_text(cmp.to_csv(f"seed={seed}"), encoding="utf-8")


if __name__ == "__main__":
    main()
