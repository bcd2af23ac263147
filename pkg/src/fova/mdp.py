"""Finite MDPs, exact dynamic-programming oracles and policy divergences."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

import numpy as np

from fova.errors import ConfigurationError, DomainError

MDP_SCHEMA_VERSION = 1
ROW_TOL = 1e-12
POLICY_TOL = 1e-10
DEFAULT_ZETA = 1e-6


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """A finite discounted MDP.

    ``transition[s, a, s']`` is the probability of moving to ``s'``;
    ``reward[s, a]`` is bounded in magnitude by ``r_max``.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    r_max: float
    gamma: float
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        if self.n_states < 1 or self.n_actions < 1:
            raise ConfigurationError("n_states and n_actions must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ConfigurationError(f"r_max must be positive, got {self.r_max}")
        t = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        mu = np.asarray(self.initial_dist, dtype=float)
        s, a = self.n_states, self.n_actions
        if t.shape != (s, a, s) or r.shape != (s, a) or mu.shape != (s,):
            raise ConfigurationError("array shapes do not match (n_states, n_actions)")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ConfigurationError("transition rows must be probability vectors")
        if np.any(np.abs(r) > self.r_max * (1 + 1e-12)):
            raise ConfigurationError("|reward| exceeds r_max")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > ROW_TOL:
            raise ConfigurationError("initial_dist must be a probability vector")
        for name, arr in (("transition", t), ("reward", r), ("initial_dist", mu)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def q_bound(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {
            "version": MDP_SCHEMA_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MdpSpec":
        version = doc.get("version", MDP_SCHEMA_VERSION)
        if version != MDP_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported MDP document version {version}")
        return cls(
            n_states=int(doc["n_states"]),
            n_actions=int(doc["n_actions"]),
            transition=np.array(doc["transition"], dtype=float),
            reward=np.array(doc["reward"], dtype=float),
            r_max=float(doc["r_max"]),
            gamma=float(doc["gamma"]),
            initial_dist=np.array(doc["initial_dist"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MdpSpec":
        return cls.from_dict(json.loads(text))

    def with_initial_dist(self, initial_dist: np.ndarray) -> "MdpSpec":
        return MdpSpec(self.n_states, self.n_actions, self.transition, self.reward,
                       self.r_max, self.gamma, np.asarray(initial_dist, dtype=float))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic ``probs[s, a]`` action distribution."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy probabilities must be a 2-D array")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > POLICY_TOL:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "TabularPolicy":
        return cls(softmax(logits))

    def with_floor(self, zeta: float = DEFAULT_ZETA) -> "TabularPolicy":
        """Clip to ``probs >= zeta`` and renormalise (idempotent for zeta <= 1/|A|)."""
        return TabularPolicy(apply_floor(self.probs, zeta))

    def logits(self) -> np.ndarray:
        return np.log(np.maximum(self.probs, 1e-300))

    def check_shape(self, mdp: MdpSpec) -> None:
        if self.probs.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(
                f"policy shape {self.probs.shape} does not match MDP "
                f"({mdp.n_states}, {mdp.n_actions})"
            )


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    state_dist: np.ndarray
    state_action_dist: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_floor(probs: np.ndarray, zeta: float) -> np.ndarray:
    if zeta <= 0:
        return np.array(probs, dtype=float)
    n_actions = probs.shape[-1]
    if zeta > 1.0 / n_actions:
        raise ValueError(f"floor {zeta} exceeds 1/|A| = {1.0 / n_actions}")
    # Mixing with uniform keeps the floor exact after renormalisation.
    p = np.maximum(probs, 0.0)
    p = p / p.sum(axis=-1, keepdims=True)
    deficit = np.maximum(zeta - p, 0.0).sum(axis=-1, keepdims=True)
    if not np.any(deficit > 0):
        return p
    clipped = np.maximum(p, zeta)
    excess = clipped - zeta
    scale = np.where(excess.sum(axis=-1, keepdims=True) > 0,
                     (1.0 - zeta * n_actions) / np.maximum(excess.sum(axis=-1, keepdims=True), 1e-300),
                     0.0)
    return zeta + excess * scale


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def make_random_mdp(n_states: int, n_actions: int, gamma: float, r_max: float, seed: int) -> MdpSpec:
    if n_states < 1 or n_actions < 1:
        raise ConfigurationError("n_states and n_actions must be positive")
    if not 0.0 < gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in (0, 1), got {gamma}")
    rng = np.random.default_rng(seed)
    raw = rng.exponential(1.0, size=(n_states, n_actions, n_states))
    transition = raw / raw.sum(axis=2, keepdims=True)
    reward = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    initial = rng.exponential(1.0, size=n_states)
    return MdpSpec(n_states, n_actions, transition, reward, float(r_max), float(gamma),
                   initial / initial.sum())


def make_gridworld(width: int, height: int, slip_prob: float, goal_reward: float,
                   gamma: float) -> MdpSpec:
    """Grid MDP with an absorbing goal in the last cell.

    Grids with a single row or column are chains with two actions
    (0 = towards cell 0, 1 = towards the goal end); all others have four
    actions (0 up, 1 right, 2 down, 3 left). Moves into a wall leave the
    agent in place. The start distribution is uniform over non-goal cells.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ConfigurationError("gridworld needs at least two cells")
    if not 0.0 <= slip_prob < 1.0:
        raise ConfigurationError(f"slip_prob must lie in [0, 1), got {slip_prob}")
    if goal_reward <= 0:
        raise ConfigurationError("goal_reward must be positive")
    n = width * height
    goal = n - 1
    if width == 1 or height == 1:
        moves = [(-1,), (1,)]
        def step(s: int, a: int) -> int:
            return min(max(s + moves[a][0], 0), n - 1)
    else:
        deltas = [(-1, 0), (0, 1), (1, 0), (0, -1)]
        def step(s: int, a: int) -> int:
            row, col = divmod(s, width)
            dr, dc = deltas[a]
            r2, c2 = row + dr, col + dc
            if 0 <= r2 < height and 0 <= c2 < width:
                return r2 * width + c2
            return s
        moves = deltas
    n_actions = len(moves)
    intended = np.zeros((n, n_actions, n))
    for s in range(n):
        for a in range(n_actions):
            intended[s, a, step(s, a)] = 1.0
    slip_row = intended.mean(axis=1, keepdims=True)
    transition = (1.0 - slip_prob) * intended + slip_prob * slip_row
    transition[goal] = 0.0
    transition[goal, :, goal] = 1.0
    reward = np.zeros((n, n_actions))
    reward[goal] = goal_reward
    initial = np.ones(n)
    initial[goal] = 0.0
    return MdpSpec(n, n_actions, transition, reward, float(goal_reward), float(gamma),
                   initial / initial.sum())


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def policy_matrices(mdp: MdpSpec, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel ``P^pi`` and expected reward ``r^pi``."""
    policy.check_shape(mdp)
    pi = policy.probs
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return p_pi, r_pi


def exact_policy_evaluation(mdp: MdpSpec, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``(I - gamma P^pi) V = r^pi`` directly; returns ``(V, Q)``."""
    p_pi, r_pi = policy_matrices(mdp, policy)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return v, q


def expected_return(mdp: MdpSpec, policy: TabularPolicy) -> float:
    v, _ = exact_policy_evaluation(mdp, policy)
    return float(mdp.initial_dist @ v)


def occupancy_measure(mdp: MdpSpec, policy: TabularPolicy) -> OccupancyMeasure:
    p_pi, _ = policy_matrices(mdp, policy)
    a = (np.eye(mdp.n_states) - mdp.gamma * p_pi).T
    d = (1.0 - mdp.gamma) * np.linalg.solve(a, mdp.initial_dist)
    d = np.maximum(d, 0.0)
    d = d / d.sum()
    return OccupancyMeasure(d, d[:, None] * policy.probs)


def solve_optimal(mdp: MdpSpec, tol: float = 1e-10, max_iter: int = 100_000) -> TabularPolicy:
    """Greedy policy of a value-iteration fixed point; ties go to the lowest action."""
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.gamma * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return TabularPolicy.deterministic(greedy_actions(q), mdp.n_actions)


def greedy_actions(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Argmax per row with near-ties resolved to the lowest index."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tol * (1.0 + np.abs(best)), axis=1)


def divergence(p: TabularPolicy, q: TabularPolicy, weights: OccupancyMeasure | np.ndarray,
               kind: Literal["KL", "TV"] = "KL") -> float:
    """State-weighted expected divergence ``E_s[D(p(.|s), q(.|s))]``."""
    if p.probs.shape != q.probs.shape:
        raise ValueError("policy shapes differ")
    w = weights.state_dist if isinstance(weights, OccupancyMeasure) else np.asarray(weights)
    return float(w @ per_state_divergence(p.probs, q.probs, kind))


def per_state_divergence(p: np.ndarray, q: np.ndarray, kind: str = "KL") -> np.ndarray:
    if kind == "TV":
        return 0.5 * np.abs(p - q).sum(axis=1)
    if kind != "KL":
        raise ValueError(f"unknown divergence kind {kind!r}")
    support = p > 0
    bad = support & (q <= 0)
    if np.any(bad):
        s, a = map(int, np.argwhere(bad)[0])
        raise DomainError(f"KL undefined: q has no mass at (s={s}, a={a}) where p > 0")
    ratio = np.where(support, p / np.where(q > 0, q, 1.0), 1.0)
    return np.where(support, p * np.log(ratio), 0.0).sum(axis=1)
