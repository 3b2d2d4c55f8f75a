"""Max-logit fusion of three seesaw models trained with different seeds and recipes."""
import numpy as np

from _common import parser, setup
from longtail_lab.harness.experiments import ensemble_trial


def main() -> None:
    p = parser(__doc__)
    p.add_argument("--normalize", action="store_true", help="log-softmax each model before fusing")
    p.add_argument("--method", default="max_logit", choices=("max_logit", "mean_prob"))
    args = p.parse_args()
    setup()
    trials = [ensemble_trial(s, normalize=args.normalize, method=args.method) for s in args.seeds]
    for t in trials:
        print(f"seed {t.seed}: singles " + " ".join(f"{v:.4f}" for v in t.singles) + f"  fused {t.fused:.4f}")
    fused = np.mean([t.fused for t in trials])
    best = np.mean([t.best_single for t in trials])
    wins = sum(t.fused > t.best_single for t in trials)
    print(f"mean fused {fused:.4f}  mean best single {best:.4f}  wins {wins}/{len(trials)}")


if __name__ == "__main__":
    main()
