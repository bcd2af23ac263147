"""Compare FOVA and its baselines on mixed-quality gridworld federations."""

import argparse
import warnings

import numpy as np

from fova.data import FederationConfig, make_federation
from fova.federation import run_training
from fova.learner import ALGOS, HyperParams
from fova.mdp import TabularPolicy, expected_return, make_gridworld, solve_optimal


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--qualities", type=float, nargs="+", default=[1.0, 1.0, 0.0, 0.0])
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--rounds", type=int, default=30)
    parser.add_argument("--n", type=int, default=2000, help="transitions per client")
    parser.add_argument("--alpha", type=float, default=5.0)
    args = parser.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    mdp = make_gridworld(4, 4, 0.1, 10.0, 0.9)
    print(f"J(optimal)={expected_return(mdp, solve_optimal(mdp)):.3f} "
          f"J(uniform)={expected_return(mdp, TabularPolicy.uniform(16, 4)):.3f}")
    final = {a: [] for a in ALGOS}
    for seed in range(args.seeds):
        fed = make_federation(mdp, FederationConfig.from_qualities(args.qualities, args.n, seed, horizon=20))
        for algo in ALGOS:
            history = run_training(mdp, fed, HyperParams(alpha=args.alpha), args.rounds, algo=algo)
            final[algo].append(history[-1].j_global)
    j = {a: np.array(v) for a, v in final.items()}
    for algo in ALGOS:
        print(f"{algo:>13}: mean {j[algo].mean():7.3f}  std {j[algo].std():6.3f}  "
              f"FOVA >= it on {np.mean(j['FOVA'] >= j[algo]):.0%} of seeds")


if __name__ == "__main__":
    main()
