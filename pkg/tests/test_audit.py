import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fova.audit import (
    BoundReport,
    Constants,
    HeterogeneityReport,
    alpha_threshold,
    bound_report,
    conservatism_audit,
    heterogeneity_norm,
    improvement_gap,
    return_gap_terms,
    return_gap_xi,
    safe_bound,
    safe_improvement_audit,
)
from fova.data import (
    Dataset,
    FederationConfig,
    build_empirical_mdp,
    collect_dataset,
    make_behavior_policy,
    make_federation,
)
from fova.federation import build_clients, train_federation
from fova.learner import HyperParams, make_client
from fova.mdp import MdpSpec, TabularPolicy, make_gridworld, make_random_mdp


def one_state(n_actions=2):
    return MdpSpec(1, n_actions, np.ones((1, n_actions, 1)), np.zeros((1, n_actions)), 1.0, 0.9, np.ones(1))


def balanced(counts):
    rows = [[0, a, 0.0, 0] for a, c in enumerate(counts) for _ in range(c)]
    return Dataset(np.array(rows), 1, len(counts))


# -- constants and thresholds -------------------------------------------------

def test_hoeffding_constants():
    c = Constants.hoeffding(4, 0.9, 2.0, 0.05)
    assert c.c_r == pytest.approx(2 * 2.0 * np.sqrt(np.log(40) / 2))
    assert c.c_t == pytest.approx(np.sqrt(8 * np.log(40)))
    assert c.combined == pytest.approx(c.c_r + 2 * 0.9 * 2.0 * c.c_t / 0.1)
    assert Constants.hoeffding(4, 0.9, 1.0, 0.05, exact_model=True).combined == 0.0


def test_threshold_hand_instance():
    # C r_max / (1 - gamma) = 1 * 1 / 0.1 = 10; sqrt(|D(s)|) = 10; D_VCQL = 1.
    data = balanced([50, 50])
    th = alpha_threshold(data, TabularPolicy.deterministic([0], 2), TabularPolicy.uniform(1, 2), 0.05,
                         1.0, 0.0, 0.9, 1.0)
    assert th == pytest.approx(1.0, abs=1e-12)


def test_threshold_zero_for_exact_model():
    data = balanced([5, 5])
    for vote in (TabularPolicy.deterministic([1], 2), TabularPolicy.uniform(1, 2)):
        assert alpha_threshold(data, vote, TabularPolicy.uniform(1, 2), 0.05, 0.0, 0.0, 0.9, 1.0) == 0.0


def test_threshold_infinite_when_vote_is_behavior():
    data = balanced([5, 5])
    uni = TabularPolicy.uniform(1, 2)
    assert alpha_threshold(data, uni, uni, 0.05, 1.0, 1.0, 0.9, 1.0) == float("inf")


# -- conservatism -------------------------------------------------------------

def test_exact_model_is_conservative_for_positive_alpha(chain):
    data = collect_dataset(chain, TabularPolicy.uniform(2, 2), 400, 20, seed=0)
    client = make_client(chain, data, HyperParams(alpha=1.0))
    star = TabularPolicy.deterministic([1, 1], 2).with_floor()
    client.local_policy = star
    audit = conservatism_audit(client, star, reference=chain)
    assert audit.all_pass
    assert audit.worst_violation <= 1e-9
    assert not np.allclose(audit.v_hat, audit.v_oracle)


def test_degenerate_case_is_exact(chain):
    data = Dataset(np.array([[0, 0, 0.0, 0], [0, 1, 0.0, 1], [1, 0, 1.0, 1], [1, 1, 1.0, 1]]), 2, 2)
    client = make_client(chain, data, HyperParams(alpha=0.0))
    audit = conservatism_audit(client, TabularPolicy.uniform(2, 2))
    assert np.max(np.abs(audit.v_hat - audit.v_oracle)) < 1e-8


# -- return gap ----------------------------------------------------------------

def test_xi_hand_instance():
    data = balanced([50, 50])
    mdp = one_state()
    uni = TabularPolicy.uniform(1, 2)
    terms = return_gap_terms(data, uni, uni, Constants(1.0, 1.0, 0.9, 1.0), build_empirical_mdp(data, mdp))
    assert terms.transition_term == pytest.approx(180 * np.sqrt(0.02), abs=1e-10)
    assert terms.reward_term == pytest.approx(10 / np.sqrt(50), abs=1e-10)
    assert terms.total == pytest.approx(25.456 + 1.414, abs=1e-3)


def test_xi_shrinks_with_data():
    mdp = one_state()
    uni = TabularPolicy.uniform(1, 2)
    c = Constants(1.0, 1.0, 0.9, 1.0)
    xis = [return_gap_xi(d, uni, uni, c, build_empirical_mdp(d, mdp)) for d in (balanced([50, 50]),
                                                                             balanced([5000, 5000]))]
    assert xis[1] == pytest.approx(xis[0] / 10)


def test_uncovered_mass_uses_coverage_floor():
    data = balanced([100, 0])
    mdp = one_state()
    uni = TabularPolicy.uniform(1, 2)
    emp = build_empirical_mdp(data, mdp, coverage_delta=0.01)
    terms = return_gap_terms(data, uni, uni, Constants(1.0, 0.0, 0.9, 1.0), emp)
    assert terms.floored_pairs == 1
    assert np.isfinite(terms.total)


@given(st.integers(0, 10_000))
def test_bound_terms_nonnegative(seed):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(3, 2, 0.9, 1.0, seed)
    data = collect_dataset(mdp, TabularPolicy.uniform(3, 2), int(rng.integers(20, 400)), 20, seed)
    emp = build_empirical_mdp(data, mdp)
    pi = TabularPolicy(rng.dirichlet(np.ones(2), size=3))
    terms = return_gap_terms(data, pi, TabularPolicy.uniform(3, 2), Constants.hoeffding(3, 0.9, 1.0, 0.05), emp)
    assert terms.transition_term >= 0 and terms.reward_term >= 0


# -- improvement bounds --------------------------------------------------------

def empty_report(weights):
    return BoundReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, weights,
                       details={"beta": 5.0, "lam": 5.0})


@pytest.mark.parametrize("level", ["local", "global"])
def test_degenerate_gap_is_equality(chain, level):
    pi = TabularPolicy(np.array([[0.3, 0.7], [0.5, 0.5]]))
    check = improvement_gap(chain, pi, pi, pi, empty_report(np.array([0.5, 0.5])), level)
    assert check.lhs == 0.0 and check.rhs == 0.0 and check.holds


def expert_chain_client(beta, lam=5.0):
    chain = make_gridworld(2, 1, 0.0, 1.0, 0.9)
    data = collect_dataset(chain, make_behavior_policy(chain, 1.0), 300, 10, seed=0)
    fed = train_federation(chain, [data], HyperParams(beta=beta, lam=lam), 3)
    return chain, fed


def test_expert_chain_target_strictly_improves():
    chain, run = expert_chain_client(25.0)
    report = bound_report(run.clients[0], run.final.global_policy, chain)
    assert report.details["global_gap"] > 0


@pytest.mark.parametrize("beta", [0.5, 1.0, 5.0, 25.0])
def test_improvement_bounds_hold_across_temperatures(beta, grid4):
    fed = make_federation(grid4, FederationConfig.from_qualities((1, 0), 1000, 4, horizon=20))
    run = train_federation(grid4, fed, HyperParams(beta=beta), 3)
    for client in run.clients:
        report = bound_report(client, run.final.global_policy, grid4)
        assert np.isfinite(report.local_gap_lower) and np.isfinite(report.global_gap_lower)
        assert report.holds_empirically["global_improvement"]
        assert report.holds_empirically["local_improvement"]
        assert report.xi_tilde >= 0 and report.xi_bar >= 0 and report.xi_b >= 0 and report.sigma >= 0


def test_bound_report_serialises(grid4):
    fed = make_federation(grid4, FederationConfig.from_qualities((1,), 500, 0, horizon=20))
    run = train_federation(grid4, fed, HyperParams(), 2)
    doc = bound_report(run.clients[0], run.final.global_policy, grid4).to_dict()
    json.dumps(doc)
    for key in ("alpha_threshold", "xi_tilde", "xi_bar", "xi_b", "sigma", "c_r_delta", "c_t_delta",
                "local_gap_lower", "global_gap_lower", "holds_empirically"):
        assert key in doc


# -- heterogeneity and safety --------------------------------------------------

def test_iid_federation_has_zero_heterogeneity(grid4):
    data = make_federation(grid4, FederationConfig.from_qualities((0.5,), 500, 0, horizon=20))[0]
    clients = build_clients(grid4, [data] * 3, HyperParams())
    report = heterogeneity_norm(clients, grid4)
    assert np.all(report.h_norms < 1e-9)


def test_iid_by_logging_policy_has_zero_heterogeneity(grid4):
    fed = make_federation(grid4, FederationConfig.from_qualities((0.4,) * 3, 300, 1, horizon=20))
    truth = [make_behavior_policy(grid4, 0.4)] * 3
    report = heterogeneity_norm(build_clients(grid4, fed, HyperParams(), truth), grid4)
    assert np.all(report.h_norms < 1e-9)


def test_single_client_heterogeneity_is_zero(grid4):
    fed = make_federation(grid4, FederationConfig.from_qualities((1,), 300, 1, horizon=20))
    assert heterogeneity_norm(build_clients(grid4, fed, HyperParams()), grid4).h_norms[0] < 1e-12


def test_different_qualities_are_heterogeneous():
    mdp = make_random_mdp(3, 2, 0.9, 1.0, 2)
    fed = make_federation(mdp, FederationConfig.from_qualities((1, 0), 300, 1, horizon=20))
    truth = [make_behavior_policy(mdp, q) for q in (1, 0)]
    report = heterogeneity_norm(build_clients(mdp, fed, HyperParams(), truth), mdp)
    assert np.all(report.h_norms > 0)
    assert report.h_terms == pytest.approx(2 * report.h_norms / 0.01)
    json.dumps(report.to_dict())


def test_unreachable_states_are_floored_and_flagged():
    # States 1 and 2 are never reached from state 0, so their occupancy is zero.
    t = np.zeros((3, 2, 3))
    t[:, :, 0] = 1.0
    mdp = MdpSpec(3, 2, t, np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]), 1.0, 0.9, np.array([1.0, 0, 0]))
    data = Dataset(np.array([[0, 0, 0.0, 0], [0, 1, 1.0, 0]] * 5), 3, 2)
    report = heterogeneity_norm(build_clients(mdp, [data, data], HyperParams()), mdp)
    assert report.floored_states == 4
    assert np.all(np.isfinite(report.h_norms))


def zero_report(k=2, l=0.0, h=0.0):
    return HeterogeneityReport([np.zeros((1, 1))] * k, np.zeros(k), np.full(k, l), np.full(k, h))


def test_safe_bound_zero_inputs():
    assert safe_bound(1.0, 1.0, zero_report(), 0.0, 0.0) == 0.0


def test_safe_bound_lambda_term_halves():
    rep = zero_report(l=1.0, h=2.0)
    # Only the lambda term differs: (l + h + 2 sigma)^2 / (8 lam) with sigma = 0.5 -> 16 / (8 lam).
    b1 = safe_bound(1.0, 1e300, rep, 0.0, 0.5)
    b2 = safe_bound(2.0, 1e300, rep, 0.0, 0.5)
    assert b1 == pytest.approx(2.0) and b2 == pytest.approx(1.0)


@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0, 5), st.floats(0, 5), st.floats(0, 3))
def test_safe_bound_decreases_in_both_multipliers(lam, beta, l, h, sigma):
    rep = zero_report(l=l, h=h)
    b = safe_bound(lam, beta, rep, 0.3, sigma, 0.2)
    assert b >= 0
    if l + h + sigma > 1e-3:
        assert safe_bound(2 * lam, beta, rep, 0.3, sigma, 0.2) < b
        assert safe_bound(lam, 2 * beta, rep, 0.3, sigma, 0.2) < b


def test_safe_bound_rejects_nonpositive_multipliers():
    with pytest.raises(ValueError):
        safe_bound(0.0, 1.0, zero_report(), 0.0, 0.0)


def test_per_round_drops_within_bound(grid4):
    fed = make_federation(grid4, FederationConfig.from_qualities((1, 1, 0, 0), 1000, 2, horizon=20))
    truth = [make_behavior_policy(grid4, d.quality_label) for d in fed]
    run = train_federation(grid4, fed, HyperParams(), 5, true_behaviors=truth)
    audit = safe_improvement_audit(grid4, run.clients, [s.global_policy for s in run.servers])
    assert len(audit.drops) == 5
    assert audit.holds.all()
