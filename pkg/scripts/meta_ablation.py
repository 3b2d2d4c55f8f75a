"""Macro-F1 with and without the one-hot meta channel, across meta fidelities."""
from _common import parser, setup
from longtail_lab.harness.experiments import mean_of, meta_ablation


def main() -> None:
    p = parser(__doc__)
    p.add_argument("--fidelity", type=float, nargs="+", default=[0.5, 0.9, 1.0])
    args = p.parse_args()
    setup()
    print(f"{'fidelity':>8}{'meta':>9}{'no meta':>9}{'delta':>9}")
    for f in args.fidelity:
        arms = meta_ablation(args.seeds, f)
        on, off = mean_of(arms["meta"]), mean_of(arms["no_meta"])
        print(f"{f:8.2f}{on:9.4f}{off:9.4f}{on - off:+9.4f}")


if __name__ == "__main__":
    main()
