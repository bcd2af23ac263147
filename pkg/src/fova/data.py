"""Behavior policies, offline dataset logging and count-based model estimates."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fova.errors import ConfigurationError, DomainError
from fova.mdp import MdpSpec, TabularPolicy, solve_optimal

DEFAULT_SMOOTHING = 0.1
DEFAULT_HORIZON = 100
CSV_HEADER = ("s", "a", "r", "s_next")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Logged transitions with exact count tallies.

    ``transitions`` is an ``(n, 4)`` float array of rows ``(s, a, r, s_next)``.
    """

    transitions: np.ndarray
    n_states: int
    n_actions: int
    quality_label: float = 0.0
    seed: int = 0
    counts_sa: np.ndarray = field(init=False)
    counts_sas: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        tr = np.array(self.transitions, dtype=float).reshape(-1, 4)
        s, a, s2 = (tr[:, i].astype(np.int64) for i in (0, 1, 3))
        if tr.size and (s.min() < 0 or s.max() >= self.n_states or s2.min() < 0
                        or s2.max() >= self.n_states or a.min() < 0 or a.max() >= self.n_actions):
            raise ConfigurationError("transition indices out of range")
        sas = np.zeros((self.n_states, self.n_actions, self.n_states), dtype=np.int64)
        np.add.at(sas, (s, a, s2), 1)
        tr.setflags(write=False)
        sas.setflags(write=False)
        sa = sas.sum(axis=2)
        sa.setflags(write=False)
        object.__setattr__(self, "transitions", tr)
        object.__setattr__(self, "counts_sas", sas)
        object.__setattr__(self, "counts_sa", sa)

    @property
    def states(self) -> np.ndarray:
        return np.asarray(self.transitions)[:, 0].astype(np.int64)

    @property
    def actions(self) -> np.ndarray:
        return np.asarray(self.transitions)[:, 1].astype(np.int64)

    @property
    def rewards(self) -> np.ndarray:
        return np.asarray(self.transitions)[:, 2]

    @property
    def next_states(self) -> np.ndarray:
        return np.asarray(self.transitions)[:, 3].astype(np.int64)

    def __len__(self) -> int:
        return self.transitions.shape[0]

    @property
    def counts_s(self) -> np.ndarray:
        return self.counts_sa.sum(axis=1)

    def state_distribution(self) -> np.ndarray:
        """Empirical state frequencies ``|D(s)| / |D|``."""
        return self.counts_s / max(len(self), 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s, a, r, s2 in self.transitions:
            writer.writerow((int(s), int(a), repr(float(r)), int(s2)))
        return buf.getvalue()

    def manifest(self, mdp_id: str) -> dict:
        return {"quality_label": self.quality_label, "seed": self.seed, "n": len(self),
                "mdp": mdp_id, "n_states": self.n_states, "n_actions": self.n_actions}

    @classmethod
    def from_csv(cls, text: str, manifest: dict) -> "Dataset":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ConfigurationError(f"dataset header must be {','.join(CSV_HEADER)}")
        rows = [(int(s), int(a), float(r), int(s2)) for s, a, r, s2 in reader]
        return cls(np.array(rows, dtype=float).reshape(-1, 4), int(manifest["n_states"]),
                   int(manifest["n_actions"]), float(manifest["quality_label"]),
                   int(manifest["seed"]))

    def save(self, path: Path, mdp_id: str) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(json.dumps(self.manifest(mdp_id), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: Path) -> "Dataset":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        return cls.from_csv(path.read_text(), manifest)


@dataclass(frozen=True, eq=False)
class EmpiricalMdp:
    """Count-based model ``M~`` with ``t_hat``, ``r_hat`` defined on covered pairs."""

    base: MdpSpec
    t_hat: np.ndarray
    r_hat: np.ndarray
    coverage_delta: float
    covered_mask: np.ndarray
    counts_sa: np.ndarray
    n_total: int

    @property
    def min_coverage(self) -> float:
        """Smallest ``|D(s,a)| / |D|`` over covered pairs."""
        covered = self.counts_sa[self.covered_mask]
        return float(covered.min() / self.n_total) if covered.size else 0.0

    @property
    def coverage_satisfied(self) -> bool:
        return self.min_coverage >= self.coverage_delta

    def as_mdp(self) -> MdpSpec:
        """``M~`` as a full MDP: uncovered pairs self-loop with reward ``-r_max``.

        Their value is then ``-r_max/(1-gamma)``, the same pessimistic default the
        learner holds fixed.
        """
        t = self.t_hat.copy()
        r = self.r_hat.copy()
        unc_s, unc_a = np.nonzero(~self.covered_mask)
        t[unc_s, unc_a, :] = 0.0
        t[unc_s, unc_a, unc_s] = 1.0
        r[unc_s, unc_a] = -self.base.r_max
        return MdpSpec(self.base.n_states, self.base.n_actions, t, r, self.base.r_max,
                       self.base.gamma, self.base.initial_dist)


def make_behavior_policy(mdp: MdpSpec, quality: float, seed: int = 0) -> TabularPolicy:
    """Mixture ``quality * pi_star + (1 - quality) * uniform``.

    ``seed`` is accepted for interface symmetry; the mixture is deterministic.
    """
    if not 0.0 <= quality <= 1.0:
        raise ConfigurationError(f"quality must lie in [0, 1], got {quality}")
    star = solve_optimal(mdp, tol=1e-10).probs
    uniform = np.full_like(star, 1.0 / mdp.n_actions)
    return TabularPolicy(quality * star + (1.0 - quality) * uniform)


def collect_dataset(mdp: MdpSpec, behavior: TabularPolicy, n: int, horizon: int = DEFAULT_HORIZON,
                    seed: int = 0, quality_label: float = 0.0, reward_noise: float = 0.0) -> Dataset:
    """Roll out episodes from ``mu0`` until ``n`` transitions are logged.

    With ``reward_noise > 0`` logged rewards get Gaussian noise, clipped to
    ``[-r_max, r_max]``.
    """
    if n < 1 or horizon < 1:
        raise ConfigurationError("n and horizon must be at least 1")
    behavior.check_shape(mdp)
    rng = np.random.default_rng(seed)
    cum_mu = np.cumsum(mdp.initial_dist)
    cum_pi = np.cumsum(behavior.probs, axis=1)
    cum_t = np.cumsum(mdp.transition, axis=2)
    n_s = mdp.n_states
    uniforms = rng.random((n, 3))
    out = np.empty((n, 4))
    s = 0
    for i in range(n):
        if i % horizon == 0:
            s = min(int(np.searchsorted(cum_mu, uniforms[i, 0] * cum_mu[-1], side="right")), n_s - 1)
        a = min(int(np.searchsorted(cum_pi[s], uniforms[i, 1] * cum_pi[s, -1], side="right")),
                mdp.n_actions - 1)
        s2 = min(int(np.searchsorted(cum_t[s, a], uniforms[i, 2] * cum_t[s, a, -1], side="right")),
                 n_s - 1)
        out[i] = (s, a, mdp.reward[s, a], s2)
        s = s2
    if reward_noise > 0:
        noise = rng.normal(0.0, reward_noise, size=n)
        out[:, 2] = np.clip(out[:, 2] + noise, -mdp.r_max, mdp.r_max)
    return Dataset(out, mdp.n_states, mdp.n_actions, float(quality_label), int(seed))


def estimate_behavior_policy(data: Dataset, smoothing: float = DEFAULT_SMOOTHING) -> TabularPolicy:
    if smoothing < 0:
        raise ConfigurationError("smoothing must be nonnegative")
    counts = data.counts_sa.astype(float) + smoothing
    totals = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / data.n_actions)
    probs = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)
    return TabularPolicy(probs)


def build_empirical_mdp(data: Dataset, mdp_shape: MdpSpec, coverage_delta: float = 1e-3) -> EmpiricalMdp:
    if not 0.0 < coverage_delta <= 1.0:
        raise ConfigurationError("coverage_delta must lie in (0, 1]")
    if len(data) == 0:
        raise DomainError("cannot build an empirical MDP from an empty dataset")
    if (data.n_states, data.n_actions) != (mdp_shape.n_states, mdp_shape.n_actions):
        raise ConfigurationError("dataset shape does not match the MDP")
    n_sa = data.counts_sa
    covered = n_sa > 0
    safe = np.where(covered, n_sa, 1).astype(float)
    t_hat = data.counts_sas / safe[:, :, None]
    reward_sum = np.zeros_like(safe)
    np.add.at(reward_sum, (data.states, data.actions), data.rewards)
    r_hat = np.where(covered, reward_sum / safe, 0.0)
    for arr in (t_hat, r_hat, covered):
        arr.setflags(write=False)
    return EmpiricalMdp(mdp_shape, t_hat, r_hat, float(coverage_delta), covered, n_sa, len(data))


@dataclass(frozen=True)
class ClientSpec:
    quality: float
    n_transitions: int
    seed: int


@dataclass(frozen=True)
class FederationConfig:
    per_client: tuple[ClientSpec, ...]
    mdp_ref: str = "mdp"
    horizon: int = DEFAULT_HORIZON
    reward_noise: float = 0.0

    def __post_init__(self) -> None:
        if len(self.per_client) < 1:
            raise ConfigurationError("a federation needs at least one client")
        for c in self.per_client:
            if not 0.0 <= c.quality <= 1.0 or c.n_transitions < 1:
                raise ConfigurationError(f"invalid client entry {c}")

    @property
    def n_clients(self) -> int:
        return len(self.per_client)

    @classmethod
    def from_qualities(cls, qualities, n_transitions: int, seed: int, **kwargs) -> "FederationConfig":
        """Derive per-client seeds from one base seed."""
        seeds = np.random.SeedSequence(seed).generate_state(len(qualities))
        return cls(tuple(ClientSpec(float(q), int(n_transitions), int(s))
                         for q, s in zip(qualities, seeds)), **kwargs)


def make_federation(mdp: MdpSpec, config: FederationConfig) -> list[Dataset]:
    out = []
    for c in config.per_client:
        behavior = make_behavior_policy(mdp, c.quality, c.seed)
        out.append(collect_dataset(mdp, behavior, c.n_transitions, config.horizon, c.seed,
                                   quality_label=c.quality, reward_noise=config.reward_noise))
    return out
