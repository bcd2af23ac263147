"""Server aggregation and the synchronous federated round loop."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from fova.data import Dataset
from fova.errors import ConfigurationError
from fova.learner import ALGOS, ClientState, HyperParams, VoteMode, local_update, make_client
from fova.mdp import MdpSpec, TabularPolicy, divergence, expected_return, occupancy_measure


@dataclass(frozen=True, eq=False)
class ServerState:
    global_policy: TabularPolicy
    global_q: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, n_states: int, n_actions: int) -> "ServerState":
        return cls(TabularPolicy.uniform(n_states, n_actions), np.zeros((n_states, n_actions)), 0)

    def to_dict(self) -> dict:
        return {"round": self.round, "global_policy": self.global_policy.probs.tolist(),
                "global_q": self.global_q.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ServerState":
        return cls(TabularPolicy(np.array(doc["global_policy"], dtype=float)),
                   np.array(doc["global_q"], dtype=float), int(doc["round"]))


@dataclass(frozen=True, eq=False)
class RoundMetrics:
    round: int
    j_global: float
    j_clients: np.ndarray
    kl_local_global: np.ndarray
    tv_local_global: np.ndarray
    warnings: tuple[str, ...] = ()
    wallclock: float = 0.0

    @property
    def j_client_mean(self) -> float:
        return float(np.mean(self.j_clients))

    def csv_row(self) -> list[str]:
        values = [self.j_global, self.j_client_mean, *self.j_clients,
                  float(np.mean(self.kl_local_global)), float(np.mean(self.tv_local_global))]
        return [str(self.round)] + [repr(float(v)) for v in values]


def metrics_header(n_clients: int) -> list[str]:
    return (["round", "j_global", "j_client_mean"] + [f"j_client_{k}" for k in range(n_clients)]
            + ["kl_mean", "tv_mean"])


def aggregate(policies: Sequence[TabularPolicy],
              qtables: Sequence[np.ndarray]) -> tuple[TabularPolicy, np.ndarray]:
    """Unweighted means of local policies and Q-tables."""
    if not policies or len(policies) != len(qtables):
        raise ValueError("need the same nonzero number of policies and Q-tables")
    shape = policies[0].probs.shape
    if any(p.probs.shape != shape for p in policies) or any(np.shape(q) != shape for q in qtables):
        raise ValueError("all policies and Q-tables must share one shape")
    pi_bar = np.mean([p.probs for p in policies], axis=0)
    q_bar = np.mean([np.asarray(q, dtype=float) for q in qtables], axis=0)
    return TabularPolicy(pi_bar), q_bar


def client_mode(mode: VoteMode, round_index: int, client_index: int) -> VoteMode:
    """Per-client, per-round sampling stream so results ignore scheduling order."""
    if mode.kind != "sampled_q":
        return mode
    seed = np.random.SeedSequence([mode.sample_seed, round_index, client_index]).generate_state(1)[0]
    return replace(mode, sample_seed=int(seed))


def run_round(server: ServerState, clients: Sequence[ClientState], mode: VoteMode, mdp: MdpSpec,
              algo: str = "FOVA", order: Sequence[int] | None = None,
              max_workers: int = 1) -> tuple[ServerState, RoundMetrics]:
    """Distribute, update every client, aggregate, and score against ``mdp``.

    ``order`` and ``max_workers`` only change scheduling; results are identical.
    """
    if not clients:
        raise ValueError("a round needs at least one client")
    start = time.perf_counter()
    order = list(range(len(clients))) if order is None else list(order)
    if sorted(order) != list(range(len(clients))):
        raise ValueError("order must be a permutation of client indices")
    for c in clients:
        c.warnings.clear()

    def work(k: int) -> tuple[np.ndarray, TabularPolicy]:
        return local_update(clients[k], server.global_policy, server.global_q,
                            client_mode(mode, server.round, k), algo)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outputs = dict(zip(order, pool.map(work, order)))
    else:
        outputs = {k: work(k) for k in order}
    qs = [outputs[k][0] for k in range(len(clients))]
    pis = [outputs[k][1] for k in range(len(clients))]
    pi_bar, q_bar = aggregate(pis, qs)
    new_server = ServerState(pi_bar, q_bar, server.round + 1)
    occ = occupancy_measure(mdp, pi_bar)
    metrics = RoundMetrics(
        round=server.round,
        j_global=expected_return(mdp, pi_bar),
        j_clients=np.array([expected_return(mdp, p) for p in pis]),
        kl_local_global=np.array([divergence(p, pi_bar, occ, "KL") for p in pis]),
        tv_local_global=np.array([divergence(p, pi_bar, occ, "TV") for p in pis]),
        warnings=tuple(w for c in clients for w in c.warnings),
        wallclock=time.perf_counter() - start,
    )
    return new_server, metrics


@dataclass
class TrainingRun:
    history: list[RoundMetrics]
    servers: list[ServerState]
    clients: list[ClientState]
    algo: str

    @property
    def final(self) -> ServerState:
        return self.servers[-1]


def build_clients(mdp: MdpSpec, federation: Sequence[Dataset], params: HyperParams,
                  true_behaviors: Sequence[TabularPolicy] | None = None) -> list[ClientState]:
    if true_behaviors is None:
        true_behaviors = [None] * len(federation)
    return [make_client(mdp, d, params, b) for d, b in zip(federation, true_behaviors)]


def train_federation(mdp: MdpSpec, federation: Sequence[Dataset], params: HyperParams, rounds: int,
                     mode: VoteMode = VoteMode(), algo: str = "FOVA", *,
                     clients: list[ClientState] | None = None, server: ServerState | None = None,
                     true_behaviors: Sequence[TabularPolicy] | None = None,
                     order: Sequence[int] | None = None, max_workers: int = 1) -> TrainingRun:
    """Algorithm loop; ``servers[t]`` is the state before round ``t`` (length ``rounds + 1``)."""
    if rounds < 1:
        raise ConfigurationError("rounds must be at least 1")
    if algo not in ALGOS:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    if clients is None:
        clients = build_clients(mdp, federation, params, true_behaviors)
    if server is None:
        server = ServerState.initial(mdp.n_states, mdp.n_actions)
    servers = [server]
    history = []
    for _ in range(rounds):
        server, metrics = run_round(server, clients, mode, mdp, algo, order, max_workers)
        servers.append(server)
        history.append(metrics)
    return TrainingRun(history, servers, list(clients), algo)


def run_training(mdp: MdpSpec, federation: Sequence[Dataset], params: HyperParams, rounds: int,
                 mode: VoteMode = VoteMode(), algo: str = "FOVA") -> list[RoundMetrics]:
    return train_federation(mdp, federation, params, rounds, mode, algo).history
