"""PER and BWT of vanilla FOVA against FOVA with the L2 anchor on Q, under a quality schedule."""

import argparse
import warnings

import numpy as np

from fova.continual import run_continual, with_l2
from fova.learner import HyperParams
from fova.mdp import make_gridworld


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--schedule", type=float, nargs="+", default=[0.0, 0.0, 1.0, 1.0, 0.3, 0.3, 0.6, 0.6])
    parser.add_argument("--l2", type=float, default=1.0, help="weight of the L2 anchor")
    parser.add_argument("--clients", type=int, default=4)
    parser.add_argument("--n", type=int, default=1000, help="transitions per client and phase")
    parser.add_argument("--rounds-per-phase", type=int, default=5)
    parser.add_argument("--seeds", type=int, default=20)
    args = parser.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    mdp = make_gridworld(4, 4, 0.1, 10.0, 0.9)
    rows = {"vanilla": [], "l2": []}
    for seed in range(args.seeds):
        for name, weight in (("vanilla", 0.0), ("l2", args.l2)):
            res = run_continual(mdp, args.schedule, args.clients, args.n, with_l2(HyperParams(), weight),
                                args.rounds_per_phase, seed)
            rows[name].append((res.per, res.bwt, res.scores[-1, -1]))
    stats = {k: np.array(v) for k, v in rows.items()}
    for name, s in stats.items():
        print(f"{name:>8}: PER {s[:, 0].mean():7.2f}  BWT {s[:, 1].mean():7.2f}  final score {s[:, 2].mean():7.2f}")
    wins = np.mean(stats["l2"][:, 1] >= stats["vanilla"][:, 1])
    print(f"L2 BWT >= vanilla BWT on {wins:.0%} of {args.seeds} seeds")


if __name__ == "__main__":
    main()
