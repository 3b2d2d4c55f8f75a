"""Plain vs test-time-augmented macro-F1 for the same trained models."""
import numpy as np

from _common import parser, setup
from longtail_lab.harness.experiments import tta_comparison


def main() -> None:
    p = parser(__doc__)
    p.add_argument("--views", type=int, default=5)
    args = p.parse_args()
    setup()
    pairs = tta_comparison(args.seeds, args.views)
    for s, (plain, tta) in zip(args.seeds, pairs):
        print(f"seed {s}: plain {plain:.4f}  tta x{args.views} {tta:.4f}  ({tta - plain:+.4f})")
    plain, tta = np.mean(pairs, axis=0)
    print(f"mean: plain {plain:.4f}  tta {tta:.4f}  ({tta - plain:+.4f})")


if __name__ == "__main__":
    main()
