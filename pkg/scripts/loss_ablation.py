"""Tail-class macro-F1 of soft-target CE vs Arcface vs Seesaw on the default long-tail dataset."""
import numpy as np

from _common import parser, setup
from longtail_lab.harness.experiments import loss_ablation, mean_of


def main() -> None:
    p = parser(__doc__)
    p.add_argument("--losses", nargs="+", default=["soft_target_ce", "label_smoothing", "ce", "arcface", "seesaw"])
    args = p.parse_args()
    setup()
    arms = loss_ablation(args.seeds, args.losses)
    print(f"{'loss':<16}{'macro':>8}{'head':>8}{'tail':>8}   per-seed tail")
    for name, runs in arms.items():
        tails = " ".join(f"{r.test['tail']:.3f}" for r in runs)
        print(f"{name:<16}{mean_of(runs):8.4f}{mean_of(runs, 'head'):8.4f}{mean_of(runs, 'tail'):8.4f}   {tails}")


if __name__ == "__main__":
    main()
