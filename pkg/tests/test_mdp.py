import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import absorbing, mdp_and_policy, random_policy
from fova.errors import ConfigurationError, DomainError
from fova.mdp import (
    MdpSpec,
    TabularPolicy,
    apply_floor,
    divergence,
    exact_policy_evaluation,
    expected_return,
    make_gridworld,
    make_random_mdp,
    occupancy_measure,
    per_state_divergence,
    policy_matrices,
    solve_optimal,
)


def iterative_values(mdp, policy, sweeps=3000):
    """Independent oracle: repeated Bellman backups instead of a linear solve."""
    p_pi, r_pi = policy_matrices(mdp, policy)
    v = np.zeros(mdp.n_states)
    for _ in range(sweeps):
        v = r_pi + mdp.gamma * p_pi @ v
    return v


# -- construction -----------------------------------------------------------

def test_random_mdp_single_state_forced():
    mdp = make_random_mdp(1, 1, 0.9, 1.0, 7)
    assert mdp.transition[0, 0, 0] == 1.0


def test_random_mdp_is_deterministic():
    a, b = make_random_mdp(5, 3, 0.9, 1.0, 42), make_random_mdp(5, 3, 0.9, 1.0, 42)
    assert np.array_equal(a.transition, b.transition)
    assert np.array_equal(a.reward, b.reward)
    assert np.array_equal(a.initial_dist, b.initial_dist)


def test_random_mdp_rows_stochastic():
    mdp = make_random_mdp(5, 3, 0.9, 1.0, 42)
    assert np.max(np.abs(mdp.transition.sum(axis=2) - 1.0)) < 1e-12
    assert np.all(np.abs(mdp.reward) <= 1.0)


@pytest.mark.parametrize("args", [(0, 2, 0.9), (2, 0, 0.9), (2, 2, 1.0), (2, 2, 0.0)])
def test_random_mdp_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        make_random_mdp(*args, 1.0, 0)


def test_chain_goal_and_start_values(chain):
    v, _ = exact_policy_evaluation(chain, solve_optimal(chain))
    assert v[1] == pytest.approx(10.0, abs=1e-12)
    assert v[0] == pytest.approx(9.0, abs=1e-12)


def test_grid_rows_stochastic():
    mdp = make_gridworld(3, 3, 0.2, 1.0, 0.95)
    assert mdp.n_actions == 4
    assert np.max(np.abs(mdp.transition.sum(axis=2) - 1.0)) < 1e-12


def test_grid_goal_absorbing_and_rewarded():
    mdp = make_gridworld(3, 2, 0.3, 2.5, 0.9)
    goal = mdp.n_states - 1
    assert np.all(mdp.transition[goal, :, goal] == 1.0)
    assert np.all(mdp.reward[goal] == 2.5)
    assert np.all(mdp.reward[:goal] == 0.0)
    assert mdp.initial_dist[goal] == 0.0


def test_grid_slip_mixes_toward_random_action():
    mdp = make_gridworld(3, 3, 0.4, 1.0, 0.9)
    # From the centre cell every action reaches a distinct neighbour.
    centre = 4
    intended = {0: 1, 1: 5, 2: 7, 3: 3}
    for a, target in intended.items():
        assert mdp.transition[centre, a, target] == pytest.approx(0.6 + 0.4 / 4)


def test_single_cell_grid_rejected():
    with pytest.raises(ConfigurationError):
        make_gridworld(1, 1, 0.0, 1.0, 0.9)


def test_spec_validation():
    t = np.ones((1, 1, 1))
    with pytest.raises(ConfigurationError):
        MdpSpec(1, 1, 0.5 * t, np.zeros((1, 1)), 1.0, 0.9, np.ones(1))
    with pytest.raises(ConfigurationError):
        MdpSpec(1, 1, t, np.full((1, 1), 2.0), 1.0, 0.9, np.ones(1))
    with pytest.raises(ConfigurationError):
        MdpSpec(1, 1, t, np.zeros((1, 1)), 1.0, 0.9, np.full(1, 0.5))


def test_json_round_trip_uses_documented_field_names():
    mdp = make_random_mdp(3, 2, 0.9, 1.0, 3)
    doc = json.loads(mdp.to_json())
    assert set(doc) == {"version", "n_states", "n_actions", "gamma", "r_max", "transition", "reward",
                        "initial_dist"}
    back = MdpSpec.from_json(mdp.to_json())
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)


def test_spec_arrays_are_read_only():
    mdp = make_random_mdp(2, 2, 0.9, 1.0, 0)
    with pytest.raises(ValueError):
        mdp.reward[0, 0] = 0.5


# -- evaluation oracles -----------------------------------------------------

def test_absorbing_state_value():
    v, q = exact_policy_evaluation(absorbing(), TabularPolicy(np.ones((1, 1))))
    assert v[0] == pytest.approx(10.0, abs=1e-12)
    assert q[0, 0] == pytest.approx(10.0, abs=1e-12)
    assert expected_return(absorbing(), TabularPolicy(np.ones((1, 1)))) == pytest.approx(10.0)


def test_chain_uniform_value(chain):
    # V0 = 0.5*0.9*V0 + 0.5*0.9*10  =>  V0 = 4.5 / 0.55 = 90/11.
    v, _ = exact_policy_evaluation(chain, TabularPolicy.uniform(2, 2))
    assert v[0] == pytest.approx(90 / 11, abs=1e-12)


def test_chain_optimal_return_and_action(chain):
    pi = solve_optimal(chain)
    assert pi.probs[0, 1] == 1.0
    assert expected_return(chain, pi) == pytest.approx(9.0, abs=1e-10)


def test_chain_occupancy_always_go(chain):
    occ = occupancy_measure(chain, TabularPolicy.deterministic([1, 1], 2))
    assert occ.state_dist == pytest.approx([0.1, 0.9], abs=1e-12)


def test_single_state_occupancy():
    occ = occupancy_measure(absorbing(), TabularPolicy(np.ones((1, 1))))
    assert occ.state_dist == pytest.approx([1.0])


def test_policy_shape_mismatch_rejected(chain):
    with pytest.raises(ValueError):
        exact_policy_evaluation(chain, TabularPolicy.uniform(3, 2))


@given(mdp_and_policy())
def test_bellman_identity(case):
    mdp, pi = case
    v, q = exact_policy_evaluation(mdp, pi)
    p_pi, r_pi = policy_matrices(mdp, pi)
    assert np.max(np.abs(v - (r_pi + mdp.gamma * p_pi @ v))) < 1e-9
    assert np.max(np.abs(v - (pi.probs * q).sum(axis=1))) < 1e-9


@given(mdp_and_policy())
def test_q_bound(case):
    mdp, pi = case
    _, q = exact_policy_evaluation(mdp, pi)
    assert np.all(np.abs(q) <= mdp.q_bound + 1e-9)


@given(mdp_and_policy(max_states=4))
def test_linear_solve_matches_iteration(case):
    mdp, pi = case
    v, _ = exact_policy_evaluation(mdp, pi)
    assert np.max(np.abs(v - iterative_values(mdp, pi))) < 1e-8


@given(mdp_and_policy())
def test_return_duality(case):
    mdp, pi = case
    occ = occupancy_measure(mdp, pi)
    via_occupancy = (occ.state_action_dist * mdp.reward).sum() / (1.0 - mdp.gamma)
    assert expected_return(mdp, pi) == pytest.approx(via_occupancy, abs=1e-8)
    assert occ.state_dist.sum() == pytest.approx(1.0, abs=1e-10)
    assert occ.state_action_dist.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(occ.state_action_dist, occ.state_dist[:, None] * pi.probs)


# -- optimal control --------------------------------------------------------

def test_single_action_mdp_has_one_policy():
    mdp = make_random_mdp(3, 1, 0.9, 1.0, 5)
    assert np.all(solve_optimal(mdp).probs == 1.0)


def test_solve_optimal_beats_random_policies():
    rng = np.random.default_rng(0)
    mdp = make_random_mdp(5, 3, 0.9, 1.0, 11)
    best = expected_return(mdp, solve_optimal(mdp))
    for _ in range(200):
        assert best >= expected_return(mdp, random_policy(rng, 5, 3, 3.0)) - 1e-9


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_solve_optimal_beats_every_deterministic_policy(n_s, n_a, seed):
    mdp = make_random_mdp(n_s, n_a, 0.9, 1.0, seed)
    best = expected_return(mdp, solve_optimal(mdp))
    for actions in itertools.product(range(n_a), repeat=n_s):
        assert best >= expected_return(mdp, TabularPolicy.deterministic(actions, n_a)) - 1e-8


def test_solve_optimal_ties_go_to_lowest_action():
    mdp = MdpSpec(1, 3, np.ones((1, 3, 1)), np.zeros((1, 3)), 1.0, 0.9, np.ones(1))
    assert solve_optimal(mdp).probs[0].tolist() == [1.0, 0.0, 0.0]


def test_solve_optimal_rejects_nonpositive_tol(chain):
    with pytest.raises(ConfigurationError):
        solve_optimal(chain, tol=0.0)


# -- divergences ------------------------------------------------------------

def test_divergence_of_identical_policies_is_zero():
    pi = TabularPolicy(np.array([[0.2, 0.8], [0.5, 0.5]]))
    w = np.array([0.3, 0.7])
    assert divergence(pi, pi, w, "KL") == 0.0
    assert divergence(pi, pi, w, "TV") == 0.0


def test_point_mass_against_uniform():
    p = TabularPolicy.deterministic([0], 2)
    q = TabularPolicy.uniform(1, 2)
    assert divergence(p, q, np.ones(1), "TV") == pytest.approx(0.5)
    assert divergence(p, q, np.ones(1), "KL") == pytest.approx(np.log(2))


def test_kl_without_support_names_the_pair():
    p = TabularPolicy.uniform(2, 2)
    q = TabularPolicy(np.array([[0.5, 0.5], [1.0, 0.0]]))
    with pytest.raises(DomainError, match=r"s=1, a=1"):
        divergence(p, q, np.ones(2) / 2, "KL")


@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_pinsker(n_s, n_a, seed):
    rng = np.random.default_rng(seed)
    p, q = random_policy(rng, n_s, n_a, 3.0), random_policy(rng, n_s, n_a, 3.0)
    tv = per_state_divergence(p.probs, q.probs, "TV")
    kl = per_state_divergence(p.probs, q.probs, "KL")
    assert np.all(tv <= np.sqrt(kl / 2.0) + 1e-12)


@given(st.integers(2, 6), st.floats(0.0, 0.15), st.integers(0, 10_000))
def test_floor_is_exact_and_stochastic(n_a, zeta, seed):
    rng = np.random.default_rng(seed)
    raw = rng.dirichlet(np.full(n_a, 0.3), size=4)
    floored = apply_floor(raw, zeta)
    assert np.all(floored >= zeta - 1e-15)
    assert np.allclose(floored.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(apply_floor(floored, zeta), floored, atol=1e-15)
