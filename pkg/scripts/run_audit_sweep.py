"""Sweep lambda and beta and report which improvement bounds hold, per federation."""

import argparse
import warnings

from fova.audit import bound_report, safe_improvement_audit
from fova.data import FederationConfig, make_behavior_policy, make_federation
from fova.federation import train_federation
from fova.learner import HyperParams
from fova.mdp import make_gridworld

FEDERATIONS = {"expert": (1.0,), "medium": (0.5,), "experts": (1.0, 1.0), "mixed": (1.0, 1.0, 0.0, 0.0)}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--values", type=float, nargs="+", default=[1.0, 5.0, 25.0])
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--n", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    mdp = make_gridworld(4, 4, 0.1, 10.0, 0.9)
    print("federation,lambda,beta,client,conservatism,return_gap,global,local,max_drop,bound")
    for name, qualities in FEDERATIONS.items():
        fed = make_federation(mdp, FederationConfig.from_qualities(qualities, args.n, args.seed, horizon=20))
        truth = [make_behavior_policy(mdp, q) for q in qualities]
        for lam in args.values:
            for beta in args.values:
                run = train_federation(mdp, fed, HyperParams(lam=lam, beta=beta), args.rounds,
                                       true_behaviors=truth)
                safety = safe_improvement_audit(mdp, run.clients, [s.global_policy for s in run.servers])
                for k, client in enumerate(run.clients):
                    h = bound_report(client, run.final.global_policy, mdp).holds_empirically
                    print(f"{name},{lam:g},{beta:g},{k},{h['conservatism']},{h['return_gap']},"
                          f"{h['global_improvement']},{h['local_improvement']},"
                          f"{safety.drops.max():.4g},{safety.bounds.min():.4g}")


if __name__ == "__main__":
    main()
