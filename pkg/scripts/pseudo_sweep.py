"""Pseudo-label fraction sweep; writes one CSV row per fraction."""
from _common import parser, setup
from longtail_lab.harness.experiments import PSEUDO_FRACTIONS, pseudo_sweep, write_pseudo_table


def main() -> None:
    p = parser(__doc__)
    p.add_argument("--fractions", type=float, nargs="+", default=list(PSEUDO_FRACTIONS))
    p.add_argument("--out", default="results/pseudo_label_sweep.csv")
    args = p.parse_args()
    setup()
    fractions = sorted(set([0.0, *args.fractions]))
    path = write_pseudo_table(pseudo_sweep(args.seeds, fractions), args.out)
    print(path.read_text(), end="")


if __name__ == "__main__":
    main()
