"""Client-side learning: vote policy, vote-based conservative evaluation, AWR improvement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from fova.data import DEFAULT_SMOOTHING, Dataset, EmpiricalMdp, build_empirical_mdp, estimate_behavior_policy
from fova.errors import ConfigurationError, DomainError
from fova.mdp import DEFAULT_ZETA, MdpSpec, TabularPolicy, apply_floor, softmax

WINNER_NAMES = ("behavior", "global", "local")
VOTE_TIE_RTOL = 1e-12
MAX_LOG_WEIGHT = 500.0
MAX_STEP = 30.0


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 5.0
    beta: float = 5.0
    lam: float = 5.0
    gamma: float = 0.9
    delta_conf: float = 0.05
    zeta: float = DEFAULT_ZETA
    eval_tol: float = 1e-10
    eval_max_iter: int = 5000
    improve_steps: int = 50
    improve_lr: float = 1.0
    l2_q_weight: float = 0.0
    smoothing: float = DEFAULT_SMOOTHING
    coverage_delta: float = 1e-3
    eval_method: Literal["solve", "iterate"] = "solve"
    vote_freeze_after: int = 200
    init_local_from_behavior: bool = False
    cql_temperature: float = 1.0

    def __post_init__(self) -> None:
        checks = [
            ("alpha", self.alpha >= 0),
            ("beta", self.beta > 0),
            ("lam", self.lam > 0),
            ("gamma", 0 < self.gamma < 1),
            ("delta_conf", 0 < self.delta_conf < 1),
            ("zeta", self.zeta >= 0),
            ("eval_tol", self.eval_tol > 0),
            ("eval_max_iter", self.eval_max_iter >= 1),
            ("improve_steps", self.improve_steps >= 1),
            ("improve_lr", self.improve_lr > 0),
            ("l2_q_weight", self.l2_q_weight >= 0),
            ("smoothing", self.smoothing >= 0),
            ("coverage_delta", 0 < self.coverage_delta <= 1),
            ("eval_method", self.eval_method in ("solve", "iterate")),
            ("vote_freeze_after", self.vote_freeze_after >= 1),
            ("cql_temperature", self.cql_temperature > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigurationError(f"{name} out of range: {getattr(self, name)!r}")


@dataclass(frozen=True)
class VoteMode:
    kind: Literal["expected_q", "sampled_q"] = "expected_q"
    sample_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("expected_q", "sampled_q"):
            raise ConfigurationError(f"unknown vote mode {self.kind!r}")


@dataclass
class ClientState:
    """Everything one client owns. Mutated only by :func:`local_update`."""

    data: Dataset
    behavior: TabularPolicy
    local_policy: TabularPolicy
    local_q: np.ndarray
    params: HyperParams
    empirical: EmpiricalMdp
    prev_q: np.ndarray | None = None
    true_behavior: TabularPolicy | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_states(self) -> int:
        return self.empirical.base.n_states

    @property
    def n_actions(self) -> int:
        return self.empirical.base.n_actions


def make_client(mdp: MdpSpec, data: Dataset, params: HyperParams,
                true_behavior: TabularPolicy | None = None) -> ClientState:
    """Client with estimated behavior, empirical model and round-0 policy/Q."""
    behavior = estimate_behavior_policy(data, params.smoothing).with_floor(params.zeta)
    empirical = build_empirical_mdp(data, mdp, params.coverage_delta)
    if params.init_local_from_behavior:
        local = behavior
    else:
        local = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    return ClientState(data, behavior, local, q, params, empirical, true_behavior=true_behavior)


# ---------------------------------------------------------------------------
# Vote
# ---------------------------------------------------------------------------

def vote_policy(state: int, q: np.ndarray, local: TabularPolicy, behavior: TabularPolicy,
                global_pi: TabularPolicy, mode: VoteMode = VoteMode(),
                rng: np.random.Generator | None = None) -> tuple[str, np.ndarray]:
    """Pick the candidate with the highest Q at ``state``.

    Candidates are scored in the order (behavior, global, local) and exact or
    near-exact ties keep the earliest.
    """
    if not (q.shape == local.probs.shape == behavior.probs.shape == global_pi.probs.shape):
        raise ValueError("Q and policy shapes must match")
    rows = [behavior.probs[state], global_pi.probs[state], local.probs[state]]
    if mode.kind == "expected_q":
        scores = np.array([r @ q[state] for r in rows])
        winner = _first_max(scores)
        return WINNER_NAMES[winner], rows[winner].copy()
    rng = rng if rng is not None else np.random.default_rng(mode.sample_seed)
    drawn = [int(rng.choice(q.shape[1], p=r)) for r in rows]
    scores = np.array([q[state, a] for a in drawn])
    winner = _first_max(scores)
    dist = np.zeros(q.shape[1])
    dist[drawn[winner]] = 1.0
    return WINNER_NAMES[winner], dist


def _first_max(scores: np.ndarray) -> int:
    best = scores.max()
    return int(np.argmax(scores >= best - VOTE_TIE_RTOL * (1.0 + abs(best))))


def vote_all_states(q: np.ndarray, local: TabularPolicy, behavior: TabularPolicy,
                    global_pi: TabularPolicy, mode: VoteMode = VoteMode(),
                    rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`vote_policy` over all states: ``(winner_index, pi_v)``."""
    stack = np.stack([behavior.probs, global_pi.probs, local.probs])
    n_s, n_a = q.shape
    if mode.kind == "expected_q":
        scores = np.einsum("csa,sa->cs", stack, q)
        best = scores.max(axis=0)
        winners = np.argmax(scores >= best - VOTE_TIE_RTOL * (1.0 + np.abs(best)), axis=0)
        return winners, stack[winners, np.arange(n_s)]
    rng = rng if rng is not None else np.random.default_rng(mode.sample_seed)
    u = rng.random((3, n_s, 1))
    drawn = np.minimum((np.cumsum(stack, axis=2) < u).sum(axis=2), n_a - 1)
    scores = np.take_along_axis(q[None], drawn[..., None], axis=2)[..., 0]
    best = scores.max(axis=0)
    winners = np.argmax(scores >= best - VOTE_TIE_RTOL * (1.0 + np.abs(best)), axis=0)
    pv = np.zeros((n_s, n_a))
    pv[np.arange(n_s), drawn[winners, np.arange(n_s)]] = 1.0
    return winners, pv


def d_vcql(p: TabularPolicy, q: TabularPolicy, state: int) -> float:
    """``sum_a p (p/q - 1)``, the chi-square divergence of ``p`` from ``q`` at ``state``."""
    return float(d_vcql_all(p.probs, q.probs)[state])


def d_vcql_all(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if np.any(q <= 0):
        s, a = map(int, np.argwhere(q <= 0)[0])
        raise DomainError(f"zero denominator at (s={s}, a={a}); apply a probability floor")
    return np.maximum((p * (p / q - 1.0)).sum(axis=1), 0.0)


# ---------------------------------------------------------------------------
# Vote-based conservative evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VcqlResult:
    q: np.ndarray
    v: np.ndarray
    vote: np.ndarray
    winners: np.ndarray
    residual: float
    iterations: int
    converged: bool
    vote_stable: bool

    @property
    def vote_policy(self) -> TabularPolicy:
        return TabularPolicy(self.vote)


def vcql_evaluate(client: ClientState, global_pi: TabularPolicy, mode: VoteMode = VoteMode(),
                  *, q_init: np.ndarray | None = None, use_vote: bool = True) -> VcqlResult:
    """Fixed point of the vote-based conservative backup on ``M~``.

    Covered pairs follow ``Q <- r_hat + gamma T_hat V - alpha (pi_v / pi_b - 1)``
    with ``V = E_{pi_v} Q`` and the vote recomputed from the current Q.
    Uncovered pairs stay at ``-r_max / (1 - gamma)``. With ``use_vote=False``
    the local policy takes the vote's place (plain conservative evaluation).

    ``eval_method="iterate"`` runs the backup literally; ``"solve"`` alternates
    a vote update with an exact linear solve for that vote, which reaches the
    same fixed point in a handful of steps.
    """
    params = client.params
    emp = client.empirical
    q0 = client.local_q if q_init is None else q_init
    q = _pessimise(np.array(q0, dtype=float), emp, params.gamma)
    rng = np.random.default_rng(mode.sample_seed) if mode.kind == "sampled_q" else None
    local = client.local_policy

    def current_vote(qv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not use_vote:
            return np.full(qv.shape[0], 2), local.probs
        return vote_all_states(qv, local, client.behavior, global_pi, mode, rng)

    if params.eval_method == "solve":
        return _vcql_solve(client, q, current_vote)
    return _vcql_iterate(client, q, current_vote)


def _pessimise(q: np.ndarray, emp: EmpiricalMdp, gamma: float) -> np.ndarray:
    q[~emp.covered_mask] = -emp.base.r_max / (1.0 - gamma)
    return q


def _backup(client: ClientState, q: np.ndarray, pv: np.ndarray) -> np.ndarray:
    params, emp = client.params, client.empirical
    v = (pv * q).sum(axis=1)
    target = emp.r_hat + params.gamma * emp.t_hat @ v - params.alpha * (pv / client.behavior.probs - 1.0)
    if params.l2_q_weight > 0 and client.prev_q is not None:
        w = 2.0 * params.l2_q_weight
        target = (target + w * client.prev_q) / (1.0 + w)
    return np.where(emp.covered_mask, target, q)


def _vcql_iterate(client: ClientState, q: np.ndarray, current_vote) -> VcqlResult:
    params = client.params
    winners, pv = current_vote(q)
    residual = np.inf
    frozen = False
    it = 0
    for it in range(1, params.eval_max_iter + 1):
        if not frozen:
            winners, pv = current_vote(q)
        q_new = _backup(client, q, pv)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual < params.eval_tol:
            break
        if it >= params.vote_freeze_after:
            frozen = True
    stable = not frozen and np.array_equal(current_vote(q)[1], pv)
    return _finish(client, q, winners, pv, residual, it, stable)


def _vcql_solve(client: ClientState, q: np.ndarray, current_vote) -> VcqlResult:
    params, emp = client.params, client.empirical
    n_s, n_a = q.shape
    cov = emp.covered_mask.ravel()
    scale = 1.0
    extra = np.zeros((n_s, n_a))
    if params.l2_q_weight > 0 and client.prev_q is not None:
        w = 2.0 * params.l2_q_weight
        scale = 1.0 / (1.0 + w)
        extra = w * client.prev_q
    fixed = q.ravel()[~cov]
    t_flat = emp.t_hat.reshape(n_s * n_a, n_s)
    seen: list[bytes] = []
    winners, pv = current_vote(q)
    vote_stable = False
    it = 0
    for it in range(1, params.eval_max_iter + 1):
        # Q = scale * (b + gamma T_hat Pi_v Q) on covered pairs; uncovered pairs are constants.
        pi_mat = np.zeros((n_s, n_s * n_a))
        pi_mat[np.repeat(np.arange(n_s), n_a), np.arange(n_s * n_a)] = pv.ravel()
        m = params.gamma * scale * t_flat @ pi_mat
        b = scale * (emp.r_hat - params.alpha * (pv / client.behavior.probs - 1.0) + extra).ravel()
        a_cc = np.eye(cov.sum()) - m[np.ix_(cov, cov)]
        rhs = b[cov] + m[np.ix_(cov, ~cov)] @ fixed
        q_flat = q.ravel().copy()
        q_flat[cov] = np.linalg.solve(a_cc, rhs)
        q = q_flat.reshape(n_s, n_a)
        seen.append(pv.tobytes())
        new_winners, new_pv = current_vote(q)
        key = new_pv.tobytes()
        if key == seen[-1]:
            vote_stable = True
            break
        if key in seen or it >= params.vote_freeze_after:
            # The vote cycles; keep the solution for the last vote it was solved with.
            break
        winners, pv = new_winners, new_pv
    residual = float(np.max(np.abs(_backup(client, q, pv) - q)))
    return _finish(client, q, winners, pv, residual, it, vote_stable)


def _finish(client: ClientState, q: np.ndarray, winners: np.ndarray, pv: np.ndarray,
            residual: float, iterations: int, vote_stable: bool) -> VcqlResult:
    v = (pv * q).sum(axis=1)
    converged = residual < client.params.eval_tol
    if not converged:
        msg = f"conservative evaluation stopped with residual {residual:.3e}"
        client.warnings.append(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
    return VcqlResult(q, v, pv, winners, residual, iterations, converged, vote_stable)


# ---------------------------------------------------------------------------
# Advantage-weighted improvement
# ---------------------------------------------------------------------------

def awr_log_weights(q: np.ndarray, v: np.ndarray, beta: float) -> np.ndarray:
    return np.minimum((q - v[:, None]) / beta, MAX_LOG_WEIGHT)


def awr_target(q: np.ndarray, v: np.ndarray, behavior: TabularPolicy, beta: float) -> TabularPolicy:
    """``pi_b * exp((Q - V) / beta)`` normalised per state."""
    if beta <= 0:
        raise ConfigurationError("beta must be positive")
    adv = (q - v[:, None]) / beta
    adv = adv - adv.max(axis=1, keepdims=True)
    unnorm = behavior.probs * np.exp(adv)
    return TabularPolicy(unnorm / unnorm.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class AwrProblem:
    """The local improvement objective as a function of softmax logits.

    ``lam * sum_s rho(s) sum_a c(s,a) log pi(a|s) + q_weight * sum_s rho(s) sum_a pi(a|s) Q(s,a)``
    with ``c = pi_b * exp((Q - V) / beta)``; for unsmoothed ``pi_b`` this is the
    dataset average of ``log pi * exp(A / beta)``.
    """

    rho: np.ndarray
    c: np.ndarray
    q: np.ndarray
    lam: float
    q_weight: float = 1.0

    @classmethod
    def build(cls, client: ClientState, q: np.ndarray, v: np.ndarray, q_weight: float = 1.0) -> "AwrProblem":
        p = client.params
        c = client.behavior.probs * np.exp(awr_log_weights(q, v, p.beta))
        return cls(client.data.state_distribution(), c, np.asarray(q, dtype=float), p.lam, q_weight)

    def per_state(self, logits: np.ndarray) -> np.ndarray:
        z = logits - logits.max(axis=1, keepdims=True)
        log_pi = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        pi = np.exp(log_pi)
        return self.lam * (self.c * log_pi).sum(axis=1) + self.q_weight * (pi * self.q).sum(axis=1)

    def objective(self, logits: np.ndarray) -> float:
        return float(self.rho @ self.per_state(logits))

    def state_gradient(self, logits: np.ndarray) -> np.ndarray:
        """Gradient of ``per_state`` w.r.t. each state's logits (no ``rho`` factor)."""
        pi = softmax(logits)
        g_bc = self.c - pi * self.c.sum(axis=1, keepdims=True)
        g_q = pi * (self.q - (pi * self.q).sum(axis=1, keepdims=True))
        return self.lam * g_bc + self.q_weight * g_q

    def gradient(self, logits: np.ndarray) -> np.ndarray:
        return self.rho[:, None] * self.state_gradient(logits)

    def natural_direction(self, logits: np.ndarray) -> np.ndarray:
        """Fisher-preconditioned ascent direction ``lam c / pi + q_weight Q``, centred under ``pi``.

        It vanishes (up to a per-state constant) exactly where
        :meth:`state_gradient` does, and for the ``lam`` term alone a unit
        step lands on the optimum to first order.
        """
        pi = softmax(logits)
        nat = self.lam * self.c / np.maximum(pi, 1e-300) + self.q_weight * self.q
        return nat - (pi * nat).sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ImproveResult:
    policy: TabularPolicy
    objective_trace: np.ndarray
    accepted_steps: int
    exhausted: bool


def awr_improve(client: ClientState, global_pi: TabularPolicy, q: np.ndarray, v: np.ndarray,
                *, steps: int | None = None, q_weight: float = 1.0,
                init: TabularPolicy | None = None) -> ImproveResult:
    """Gradient ascent on the local improvement objective from ``global_pi``'s logits.

    Each state takes a natural-gradient step scaled by its curvature; a step
    that lowers that state's objective is retried with half the learning rate
    (at most 20 times), so the total objective never decreases.
    """
    p = client.params
    problem = AwrProblem.build(client, q, v, q_weight)
    start = init if init is not None else global_pi
    logits = np.log(np.maximum(apply_floor(start.probs, p.zeta), 1e-300))
    n_steps = p.improve_steps if steps is None else steps
    visited = problem.rho > 0
    curvature = p.lam * problem.c.sum(axis=1) + q_weight * np.ptp(problem.q, axis=1) + 1e-12
    lr = np.full(logits.shape[0], p.improve_lr)
    f = problem.per_state(logits)
    trace = [float(problem.rho @ f)]
    accepted = 0
    exhausted = False
    for _ in range(n_steps):
        step = np.clip(problem.natural_direction(logits) / curvature[:, None], -MAX_STEP, MAX_STEP)
        moved = np.zeros(logits.shape[0], dtype=bool)
        pending = visited.copy()
        for _halving in range(21):
            if not pending.any():
                break
            trial = np.where(pending[:, None], logits + lr[:, None] * step, logits)
            f_trial = problem.per_state(trial)
            ok = pending & (f_trial >= f)
            logits = np.where(ok[:, None], trial, logits)
            f = np.where(ok, f_trial, f)
            moved |= ok
            pending &= ~ok
            lr = np.where(pending, lr * 0.5, lr)
        if pending.any():
            exhausted = True
        # Recover from earlier halvings so one bad step does not stall a state.
        lr = np.where(moved, np.minimum(lr * 2.0, p.improve_lr), lr)
        accepted += int(moved.any())
        trace.append(float(problem.rho @ f))
    policy = TabularPolicy(apply_floor(softmax(logits), p.zeta))
    if exhausted:
        msg = "policy improvement exhausted its backtracking budget"
        client.warnings.append(msg)
    return ImproveResult(policy, np.array(trace), accepted, exhausted)


def behavior_kl_improve(client: ClientState, q: np.ndarray) -> TabularPolicy:
    """Maximiser of ``E_pi[Q] - beta KL(pi || pi_b)`` per state."""
    p = client.params
    return TabularPolicy(apply_floor(awr_target(q, np.zeros(q.shape[0]), client.behavior, p.beta).probs,
                                     p.zeta))


def softmax_improve(client: ClientState, q: np.ndarray) -> TabularPolicy:
    """``pi ∝ exp(Q / temperature)``, the baseline's greedy-softmax step."""
    p = client.params
    return TabularPolicy(apply_floor(softmax(q / p.cql_temperature), p.zeta))


# ---------------------------------------------------------------------------
# One local round
# ---------------------------------------------------------------------------

ALGOS = ("FOVA", "CQL_FL", "FOVA_NO_VOTE", "FOVA_NO_AWR")


def local_update(client: ClientState, global_pi: TabularPolicy, global_q: np.ndarray,
                 mode: VoteMode = VoteMode(), algo: str = "FOVA") -> tuple[np.ndarray, TabularPolicy]:
    """Warm-start from ``global_q``, evaluate, improve, and store ``(Q_k, pi_k)``."""
    if algo not in ALGOS:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    global_pi = TabularPolicy(apply_floor(global_pi.probs, client.params.zeta))
    use_vote = algo in ("FOVA", "FOVA_NO_AWR")
    result = vcql_evaluate(client, global_pi, mode, q_init=global_q, use_vote=use_vote)
    if algo == "CQL_FL":
        policy = softmax_improve(client, result.q)
    elif algo == "FOVA_NO_AWR":
        policy = behavior_kl_improve(client, result.q)
    else:
        policy = awr_improve(client, global_pi, result.q, result.v).policy
    client.local_q = result.q
    client.local_policy = policy
    return result.q, policy


def with_params(client: ClientState, **changes) -> ClientState:
    """Copy of ``client`` with updated hyperparameters (model estimates reused)."""
    return replace(client, params=replace(client.params, **changes), warnings=[])
