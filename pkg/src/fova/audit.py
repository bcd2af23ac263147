"""Closed-form conservatism, return-gap, improvement and heterogeneity bounds, checked against the oracle."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from fova.data import Dataset, EmpiricalMdp
from fova.learner import ClientState, VoteMode, awr_target, d_vcql_all, vcql_evaluate
from fova.mdp import (
    MdpSpec,
    TabularPolicy,
    apply_floor,
    exact_policy_evaluation,
    expected_return,
    occupancy_measure,
    per_state_divergence,
)

CONSERVATISM_TOL = 1e-9


@dataclass(frozen=True)
class Constants:
    """Concentration constants and the MDP scalars the bounds need."""

    c_r: float
    c_t: float
    gamma: float
    r_max: float

    @classmethod
    def hoeffding(cls, n_states: int, gamma: float, r_max: float, delta: float,
                  exact_model: bool = False) -> "Constants":
        """``c_r = 2 r_max sqrt(log(2/delta)/2)``, ``c_t = sqrt(2 |S| log(2/delta))``.

        ``exact_model`` zeroes both, for data whose empirical model has no error.
        """
        if exact_model:
            return cls(0.0, 0.0, gamma, r_max)
        log_term = np.log(2.0 / delta)
        return cls(2.0 * r_max * np.sqrt(log_term / 2.0), float(np.sqrt(2.0 * n_states * log_term)),
                   gamma, r_max)

    @property
    def combined(self) -> float:
        """``c_r + 2 gamma r_max c_t / (1 - gamma)``."""
        return self.c_r + 2.0 * self.gamma * self.r_max * self.c_t / (1.0 - self.gamma)


# ---------------------------------------------------------------------------
# Conservatism
# ---------------------------------------------------------------------------

def alpha_threshold(data: Dataset, vote: TabularPolicy, behavior: TabularPolicy, delta_conf: float,
                    c_r: float, c_t: float, gamma: float, r_max: float) -> float:
    """Smallest conservatism weight that keeps the vote value a lower bound w.h.p.

    ``max_s [C r_max / ((1-gamma) sqrt|D(s)|)] / D_VCQL(s)`` over visited states
    with ``D_VCQL(s) > 0``. ``delta_conf`` enters through the constants.
    """
    del delta_conf
    combined = Constants(c_r, c_t, gamma, r_max).combined
    if combined == 0.0:
        return 0.0
    n_s = data.counts_s
    dv = d_vcql_all(vote.probs, behavior.probs)
    active = (n_s > 0) & (dv > 0)
    if not active.any():
        return float("inf")
    per_state = combined * r_max / ((1.0 - gamma) * np.sqrt(n_s[active])) / dv[active]
    return float(per_state.max())


@dataclass(frozen=True, eq=False)
class ConservatismAudit:
    states: np.ndarray
    passed: np.ndarray
    worst_violation: float
    v_hat: np.ndarray
    v_oracle: np.ndarray

    @property
    def all_pass(self) -> bool:
        return bool(self.passed.all())


def conservatism_audit(client: ClientState, global_pi: TabularPolicy, mode: VoteMode = VoteMode(),
                       reference: MdpSpec | None = None) -> ConservatismAudit:
    """Compare the learned vote value with the oracle value of the final vote policy.

    ``reference`` defaults to the client's empirical MDP; pass the true MDP to
    audit against ground truth instead.
    """
    result = vcql_evaluate(client, global_pi, mode)
    ref = client.empirical.as_mdp() if reference is None else reference
    v_oracle, _ = exact_policy_evaluation(ref, result.vote_policy)
    states = np.flatnonzero(client.data.counts_s > 0)
    gap = result.v[states] - v_oracle[states]
    return ConservatismAudit(states, gap <= CONSERVATISM_TOL, float(max(gap.max(initial=0.0), 0.0)),
                             result.v, v_oracle)


# ---------------------------------------------------------------------------
# Return gap between the empirical and the true MDP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class XiTerms:
    transition_term: float
    reward_term: float
    floored_pairs: int

    @property
    def total(self) -> float:
        return self.transition_term + self.reward_term


def return_gap_terms(data: Dataset, policy: TabularPolicy, behavior: TabularPolicy,
                     constants: Constants, empirical: EmpiricalMdp,
                     per_state_counts: bool = False) -> XiTerms:
    """Both terms of the return-gap bound.

    The transition term averages ``sqrt((1 + D_VCQL(s)) |A| / n)`` over the
    policy's occupancy on ``M~`` with ``n = |D|`` (or ``|D(s)|`` when
    ``per_state_counts``); the reward term averages ``1/sqrt(|D(s,a)|)`` over
    the policy's state-action occupancy. Counts below ``delta |D|`` are raised
    to that floor.
    """
    g, n_a = constants.gamma, data.n_actions
    occ = occupancy_measure(empirical.as_mdp(), policy)
    floor = empirical.coverage_delta * len(data)
    n_sa = data.counts_sa.astype(float)
    weak = (policy.probs > 0) & (n_sa < floor)
    floored = int(np.count_nonzero(weak & (occ.state_action_dist > 0)))
    n_sa = np.maximum(n_sa, floor)
    d_prime = 1.0 + d_vcql_all(policy.probs, behavior.probs)
    n_states = np.maximum(data.counts_s.astype(float), floor) if per_state_counts else float(len(data))
    t_term = (2.0 * g * constants.r_max * constants.c_t / (1.0 - g) ** 2
              * float(occ.state_dist @ np.sqrt(d_prime * n_a / n_states)))
    r_term = constants.c_r / (1.0 - g) * float((occ.state_action_dist / np.sqrt(n_sa)).sum())
    return XiTerms(t_term, r_term, floored)


def return_gap_xi(data: Dataset, policy: TabularPolicy, behavior: TabularPolicy, constants: Constants,
                  empirical: EmpiricalMdp, per_state_counts: bool = False) -> float:
    return return_gap_terms(data, policy, behavior, constants, empirical, per_state_counts).total


# ---------------------------------------------------------------------------
# Improvement over the behavior policy
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    alpha_threshold: float
    xi_tilde: float
    xi_bar: float
    xi_b: float
    sigma: float
    c_r_delta: float
    c_t_delta: float
    local_gap_lower: float
    global_gap_lower: float
    coverage_fraction: float
    kl_target_behavior: float
    kl_target_local: float
    state_weights: np.ndarray = field(repr=False)
    holds_empirically: dict[str, bool] = field(default_factory=dict)
    details: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["state_weights"] = self.state_weights.tolist()
        return doc


@dataclass(frozen=True)
class GapCheck:
    lhs: float
    rhs: float
    holds: bool


def weighted_kl(p: TabularPolicy, q: TabularPolicy, weights: np.ndarray, zeta: float = 1e-6) -> float:
    q_safe = apply_floor(q.probs, zeta) if np.any(q.probs <= 0) else q.probs
    return float(weights @ per_state_divergence(p.probs, q_safe, "KL"))


def improvement_gap(mdp: MdpSpec, learned: TabularPolicy, behavior: TabularPolicy,
                    target: TabularPolicy, report: BoundReport,
                    level: Literal["local", "global"]) -> GapCheck:
    """Oracle improvement ``J(learned) - J(behavior)`` against its guaranteed lower bound.

    ``level="global"`` audits the closed-form target itself
    (``beta KL(target, pi_b) - sigma - xi_b - xi_bar``); ``"local"`` audits the
    improved local policy
    (``lam KL(target, pi_k) + beta KL(target, pi_b) - 3 sigma - xi_b - 2 xi_bar - xi_tilde``).
    The ``lam``/``beta`` multipliers are read from ``report.details``.
    """
    lhs = expected_return(mdp, learned) - expected_return(mdp, behavior)
    w = report.state_weights
    beta, lam = report.details["beta"], report.details["lam"]
    kl_b = weighted_kl(target, behavior, w)
    if level == "global":
        rhs = beta * kl_b - report.sigma - report.xi_b - report.xi_bar
    elif level == "local":
        kl_k = weighted_kl(target, learned, w)
        rhs = (lam * kl_k + beta * kl_b - 3.0 * report.sigma - report.xi_b
               - 2.0 * report.xi_bar - report.xi_tilde)
    else:
        raise ValueError(f"unknown level {level!r}")
    return GapCheck(float(lhs), float(rhs), bool(lhs >= rhs))


def bound_report(client: ClientState, global_pi: TabularPolicy, mdp: MdpSpec,
                 constants: Constants | None = None, mode: VoteMode = VoteMode()) -> BoundReport:
    """Every per-client bound for the client's current ``(Q_k, pi_k)``, with oracle checks.

    The behavior policy used throughout is the learner's estimate.
    """
    p = client.params
    emp = client.empirical
    if constants is None:
        constants = Constants.hoeffding(mdp.n_states, p.gamma, mdp.r_max, p.delta_conf)
    result = vcql_evaluate(client, global_pi, mode)
    behavior = client.behavior
    target = TabularPolicy(apply_floor(awr_target(result.q, result.v, behavior, p.beta).probs, p.zeta))
    local = client.local_policy
    weights = client.data.state_distribution()
    coverage = emp.min_coverage
    sigma = 2.0 * p.alpha / (coverage * (1.0 - p.gamma)) if p.alpha > 0 else 0.0
    xi_tilde = return_gap_xi(client.data, local, behavior, constants, emp)
    xi_bar = return_gap_xi(client.data, target, behavior, constants, emp, per_state_counts=True)
    xi_b = return_gap_xi(client.data, behavior, behavior, constants, emp, per_state_counts=True)
    report = BoundReport(
        alpha_threshold=alpha_threshold(client.data, result.vote_policy, behavior, p.delta_conf,
                                        constants.c_r, constants.c_t, p.gamma, mdp.r_max),
        xi_tilde=xi_tilde, xi_bar=xi_bar, xi_b=xi_b, sigma=sigma,
        c_r_delta=constants.c_r, c_t_delta=constants.c_t,
        local_gap_lower=0.0, global_gap_lower=0.0, coverage_fraction=coverage,
        kl_target_behavior=weighted_kl(target, behavior, weights),
        kl_target_local=weighted_kl(target, local, weights),
        state_weights=weights,
        details={"beta": p.beta, "lam": p.lam, "alpha": p.alpha},
    )
    glob = improvement_gap(mdp, target, behavior, target, report, "global")
    loc = improvement_gap(mdp, local, behavior, target, report, "local")
    report.global_gap_lower = glob.rhs
    report.local_gap_lower = loc.rhs
    report.details.update({"global_gap": glob.lhs, "local_gap": loc.lhs})
    cons = conservatism_audit(client, global_pi, mode)
    j_gap = abs(expected_return(emp.as_mdp(), local) - expected_return(mdp, local))
    report.details["return_gap"] = j_gap
    report.holds_empirically = {
        "conservatism": cons.all_pass,
        "return_gap": bool(j_gap <= xi_tilde),
        "global_improvement": glob.holds,
        "local_improvement": loc.holds,
    }
    return report


# ---------------------------------------------------------------------------
# Heterogeneity and the safe-improvement bound
# ---------------------------------------------------------------------------

@dataclass
class HeterogeneityReport:
    h_matrices: list[np.ndarray]
    h_norms: np.ndarray
    l_terms: np.ndarray
    h_terms: np.ndarray
    safe_bound: float = float("nan")
    floored_states: int = 0

    def to_dict(self) -> dict:
        return {
            "h_matrices": [h.tolist() for h in self.h_matrices],
            "h_norms": self.h_norms.tolist(),
            "l_terms": self.l_terms.tolist(),
            "h_terms": self.h_terms.tolist(),
            "safe_bound": self.safe_bound,
            "floored_states": self.floored_states,
        }


def heterogeneity_norm(clients: Sequence[ClientState], mdp: MdpSpec, dynamics: Literal["true", "empirical"] = "true",
                       zeta: float = 1e-6) -> HeterogeneityReport:
    """``H_k = (1/K) sum_n Lambda_k^{-1} Lambda_n A_n - A_k`` and the derived terms.

    ``Lambda_k`` is the diagonal state occupancy of client ``k``'s behavior
    (its true policy when known) and ``A_k`` that policy's advantage, both
    under the true MDP or under the client's empirical model. Occupancies
    below ``zeta`` are raised to ``zeta`` before inversion.
    """
    if not clients:
        raise ValueError("need at least one client")
    g = mdp.gamma
    occs, advs = [], []
    floored = 0
    for c in clients:
        model = mdp if dynamics == "true" else c.empirical.as_mdp()
        pi_b = c.true_behavior if c.true_behavior is not None else c.behavior
        v, q = exact_policy_evaluation(model, pi_b)
        d = occupancy_measure(model, pi_b).state_dist
        floored += int(np.count_nonzero(d < zeta))
        occs.append(np.maximum(d, zeta))
        advs.append(q - v[:, None])
    weighted = np.mean([d[:, None] * a for d, a in zip(occs, advs)], axis=0)
    h = [weighted / d[:, None] - a for d, a in zip(occs, advs)]
    norms = np.array([np.linalg.norm(m) for m in h])
    l_terms = np.array([2.0 * g * np.abs(a).max() / (1.0 - g) ** 2 for a in advs])
    h_terms = 2.0 * norms / (1.0 - g) ** 2
    return HeterogeneityReport(h, norms, l_terms, h_terms, floored_states=floored)


def safe_bound(lam: float, beta: float, report: HeterogeneityReport, xi_terms, sigma,
               tv_terms=0.0) -> float:
    """``B(lam, beta)``: the largest per-round drop the safe-improvement bound allows.

    ``xi_terms[k]`` is client ``k``'s ``xi^{t+1} + xi^t``; ``tv_terms[k]`` is
    ``TV(pi_b_k, pi_bar^t)``; ``sigma`` may be a scalar or per-client.
    """
    if lam <= 0 or beta <= 0:
        raise ValueError("lam and beta must be positive")
    k = len(report.l_terms)
    xi = np.broadcast_to(np.asarray(xi_terms, dtype=float), (k,))
    tv = np.broadcast_to(np.asarray(tv_terms, dtype=float), (k,))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (k,))
    l, h = report.l_terms, report.h_terms
    return float(np.mean(xi) + np.mean(l * tv) + np.mean((l + h + 2 * sig) ** 2) / (8 * lam)
                 + np.mean((l + h + sig) ** 2) / (8 * beta))


@dataclass(frozen=True, eq=False)
class SafetyAudit:
    drops: np.ndarray
    bounds: np.ndarray

    @property
    def holds(self) -> np.ndarray:
        return self.drops <= self.bounds


def safe_improvement_audit(mdp: MdpSpec, clients: Sequence[ClientState],
                           global_policies: Sequence[TabularPolicy],
                           constants: Constants | None = None) -> SafetyAudit:
    """Per-round ``J(pi_bar^t) - J(pi_bar^{t+1})`` against ``B(lam, beta)``.

    ``xi^t`` is each client's return-gap bound evaluated at ``pi_bar^t``.
    """
    p = clients[0].params
    if constants is None:
        constants = Constants.hoeffding(mdp.n_states, p.gamma, mdp.r_max, p.delta_conf)
    het = heterogeneity_norm(clients, mdp)
    sigma = np.array([2.0 * p.alpha / (c.empirical.min_coverage * (1.0 - p.gamma)) for c in clients])
    xi = np.array([[return_gap_xi(c.data, TabularPolicy(apply_floor(pi.probs, p.zeta)), c.behavior,
                                  constants, c.empirical) for c in clients] for pi in global_policies])
    returns = np.array([expected_return(mdp, pi) for pi in global_policies])
    drops, bounds = [], []
    for t in range(len(global_policies) - 1):
        tv = np.array([float(c.data.state_distribution()
                             @ per_state_divergence(c.behavior.probs, global_policies[t].probs, "TV"))
                       for c in clients])
        bounds.append(safe_bound(p.lam, p.beta, het, xi[t] + xi[t + 1], sigma, tv))
        drops.append(returns[t] - returns[t + 1])
    return SafetyAudit(np.array(drops), np.array(bounds))
