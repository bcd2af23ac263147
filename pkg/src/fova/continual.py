"""Sequential-quality training and the average-performance / backward-transfer metrics."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from fova.data import Dataset, FederationConfig, make_behavior_policy, make_federation
from fova.federation import RoundMetrics, ServerState, train_federation
from fova.learner import HyperParams, VoteMode, make_client
from fova.mdp import MdpSpec, TabularPolicy, expected_return, solve_optimal


def per_bwt(scores: np.ndarray) -> tuple[float, float]:
    """``PER = mean_k a[K,k]`` and ``BWT = mean_{k<K} (a[K,k] - a[k,k])``.

    Only the lower triangle of ``scores`` is read. ``BWT`` is ``nan`` when
    there is a single phase.
    """
    a = np.asarray(scores, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError("scores must be a nonempty square matrix")
    k = a.shape[0]
    per = float(np.mean(a[k - 1, :]))
    if k == 1:
        return per, float("nan")
    bwt = float(np.mean(a[k - 1, : k - 1] - np.diag(a)[: k - 1]))
    return per, bwt


@dataclass
class ContinualResult:
    scores: np.ndarray
    per: float
    bwt: float
    history: list[RoundMetrics]
    phase_policies: list[TabularPolicy]
    servers: list[ServerState]
    clients: list


def normalized_score(mdp: MdpSpec, policy: TabularPolicy) -> float:
    """``100 (J(pi) - J(uniform)) / (J(pi_star) - J(uniform))``, using exact references."""
    j_rand = expected_return(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions))
    j_star = expected_return(mdp, solve_optimal(mdp))
    span = j_star - j_rand
    if span <= 0:
        return 100.0
    return 100.0 * (expected_return(mdp, policy) - j_rand) / span


def phase_federations(mdp: MdpSpec, schedule: Sequence[float], n_clients: int, n_transitions: int,
                      seed: int, horizon: int = 20, reward_noise: float = 0.0) -> list[list[Dataset]]:
    """One federation per phase, every client logging at that phase's quality."""
    phase_seeds = np.random.SeedSequence(seed).generate_state(len(schedule))
    out = []
    for quality, phase_seed in zip(schedule, phase_seeds):
        config = FederationConfig.from_qualities([quality] * n_clients, n_transitions, int(phase_seed),
                                                 horizon=horizon, reward_noise=reward_noise)
        out.append(make_federation(mdp, config))
    return out


def run_continual(mdp: MdpSpec, schedule: Sequence[float], n_clients: int, n_transitions: int,
                  params: HyperParams, rounds_per_phase: int, seed: int,
                  mode: VoteMode = VoteMode(), algo: str = "FOVA", horizon: int = 20,
                  max_workers: int = 1,
                  phases: Sequence[Sequence[Dataset]] | None = None) -> ContinualResult:
    """Train through phases whose datasets all share one quality label.

    Each phase swaps every client's dataset while carrying ``(Q_k, pi_k)`` and
    the server state forward. When ``params.l2_q_weight > 0`` the Q-tables
    from the end of the previous phase anchor the next phase's evaluation.
    Every phase shares ``mdp``, so ``a[i, j]`` (for ``j <= i``) is the
    normalized return of the global policy after phase ``i``.
    """
    if phases is None:
        phases = phase_federations(mdp, schedule, n_clients, n_transitions, seed, horizon)
    server = ServerState.initial(mdp.n_states, mdp.n_actions)
    clients = None
    history: list[RoundMetrics] = []
    policies: list[TabularPolicy] = []
    servers = [server]
    for quality, datasets in zip(schedule, phases):
        true_b = make_behavior_policy(mdp, quality)
        fresh = [make_client(mdp, d, params, true_b) for d in datasets]
        if clients is not None:
            for new, old in zip(fresh, clients):
                new.local_policy = old.local_policy
                new.local_q = old.local_q
                if params.l2_q_weight > 0:
                    new.prev_q = old.local_q.copy()
        clients = fresh
        run = train_federation(mdp, datasets, params, rounds_per_phase, mode, algo,
                               clients=clients, server=server, max_workers=max_workers)
        server = run.final
        servers.extend(run.servers[1:])
        history.extend(run.history)
        policies.append(server.global_policy)
    k = len(schedule)
    scores = np.full((k, k), np.nan)
    for i in range(k):
        scores[i, : i + 1] = normalized_score(mdp, policies[i])
    per, bwt = per_bwt(scores)
    return ContinualResult(scores, per, bwt, history, policies, servers, clients)


def with_l2(params: HyperParams, weight: float) -> HyperParams:
    return replace(params, l2_q_weight=weight)
