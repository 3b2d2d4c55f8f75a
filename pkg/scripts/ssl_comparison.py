"""Supervised vs SimCLR-joint macro-F1, and the MoCo pretraining loss curve per seed."""
from _common import parser, setup
from longtail_lab.harness.experiments import mean_of, moco_loss_curves, ssl_comparison


def main() -> None:
    args = parser(__doc__).parse_args()
    setup()
    arms = ssl_comparison(args.seeds)
    for name, runs in arms.items():
        print(f"{name:<14} mean macro-F1 {mean_of(runs):.4f}  " + " ".join(f"{r.test['macro']:.3f}" for r in runs))
    for seed, curve in moco_loss_curves(args.seeds).items():
        strict = all(b < a for a, b in zip(curve, curve[1:]))
        print(f"moco seed {seed}: " + " ".join(f"{v:.4f}" for v in curve) + ("  strictly decreasing" if strict else ""))


if __name__ == "__main__":
    main()
