import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoisched.mdp import (
    StateSpace,
    StateSpaceTooLargeError,
    argmin_lowest,
    bellman_backup,
    bellman_residual,
    greedy_policy,
    myopic_action,
    relative_value_iteration,
    verify_monotonicity,
)
from aoisched.model import SystemState, cost, make_spec, transition_distribution
from aoisched.sim import PolicyHandle, run_episode
from aoisched.sim.scenarios import scenario_motivating, scenario_small_factory, scenario_toy

from test_model import specs


def brute_force_q_values(space, h):
    spec, Q = space.spec, space.Q
    out = np.empty((spec.num_sensors, space.num_states))
    for i in range(space.num_states):
        state = space.decode(i)
        for a in range(spec.num_sensors):
            dist = transition_distribution(spec, state, a, truncation=Q)
            out[a, i] = cost(spec, state, a) + sum(p * h[space.encode(s)] for s, p in dist)
    return out


def myopic_table(space):
    return argmin_lowest(space.operator.costs.reshape(space.spec.num_sensors, -1))


# -- state space --------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(specs(), st.integers(1, 4))
def test_codec_is_a_bijection(spec, Q):
    space = StateSpace(spec, Q)
    for i in range(space.num_states):
        assert space.encode(space.decode(i)) == i
    states, aoi = space.decode_arrays()
    np.testing.assert_array_equal(space.encode_arrays(states, aoi), np.arange(space.num_states))


def test_codec_layout_puts_source_states_in_high_digits():
    space = StateSpace(scenario_toy("b", 0.5, 0.5), 3)
    assert space.encode(SystemState((0, 0), (1, 2))) == 1
    assert space.encode(SystemState((0, 1), (1, 1))) == 9
    assert space.num_states == 4 * 9


def test_encode_arrays_clamps_to_q():
    space = StateSpace(scenario_toy("a", 0.5), 5)
    idx = space.encode_arrays(np.array([[0, 0]]), np.array([[9, 2]]))
    assert idx[0] == space.encode(SystemState((0, 0), (5, 2)))
    with pytest.raises(ValueError):
        space.encode(SystemState((0, 0), (6, 1)))


def test_state_space_caps():
    spec = make_spec([1.0], [([[1.0]], [[1.0]])] * 7)
    with pytest.raises(StateSpaceTooLargeError):
        StateSpace(spec, 2)
    with pytest.raises(StateSpaceTooLargeError):
        StateSpace(scenario_small_factory(0.1, 0.5), 100)


def test_reachable_sources_of_deterministic_ring():
    spec, init = scenario_motivating()
    space = StateSpace(spec, 3)
    mask = space.reachable_sources(init.source_states)
    assert mask.sum() == 5
    assert mask[(2, 3, 4)] and not mask[(0, 0, 0)]


# -- Bellman operator ---------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(specs(max_sources=2, max_states=2, max_sensors=3), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_factored_expectation_matches_enumerated_kernel(spec, Q, seed):
    space = StateSpace(spec, Q)
    h = np.random.default_rng(seed).normal(size=space.num_states)
    np.testing.assert_allclose(space.operator.q_values(h), brute_force_q_values(space, h), atol=1e-10)


def test_kernel_agreement_on_three_sources():
    spec = scenario_small_factory(0.2, 0.6)
    space = StateSpace(spec, 2)
    h = np.random.default_rng(3).normal(size=space.num_states)
    np.testing.assert_allclose(space.operator.q_values(h), brute_force_q_values(space, h), atol=1e-10)


def test_first_sweep_from_zero_is_cost_difference():
    spec = scenario_toy("c", 0.7, 0.3)
    space = StateSpace(spec, 6)
    ref = space.default_reference()
    b = bellman_backup(space, np.zeros(space.num_states), ref)
    costs = space.operator.costs.reshape(3, -1).min(axis=0)
    np.testing.assert_allclose(b.h, costs - costs[ref])
    assert b.h[ref] == 0.0
    assert b.delta_low <= b.delta_high


def test_hand_computed_backups():
    spec = make_spec([1.0], [([[1.0]], [[0.5]])])
    space = StateSpace(spec, 3)
    ref = space.default_reference()
    b1 = bellman_backup(space, np.zeros(3), ref)
    np.testing.assert_allclose(b1.h, [-1.0, -0.5, 0.0])
    assert (b1.lam, b1.delta_low, b1.delta_high) == pytest.approx((2.5, 1.5, 2.5))
    b2 = bellman_backup(space, b1.h, ref)
    np.testing.assert_allclose(b2.h, [-1.25, -0.5, 0.0])
    assert (b2.lam, b2.delta_low, b2.delta_high) == pytest.approx((2.0, 1.75, 2.0))
    table, _ = relative_value_iteration(spec, 3, epsilon=1e-10)
    # Stationary AoI law on {1, 2, 3} is (1/2, 1/4, 1/4); the gain is 1 + E[AoI]/2.
    assert table.gain == pytest.approx(1.875, abs=1e-9)


# -- relative value iteration --------------------------------------------------


@pytest.mark.parametrize(
    "spec, Q",
    [(scenario_toy("a", 0.6), 30), (scenario_toy("b", 0.6, 0.4), 30), (scenario_toy("c", 0.3, 0.2), 25)],
)
def test_span_bracket_and_residual(spec, Q):
    eps = 1e-6
    table, policy = relative_value_iteration(spec, Q, epsilon=eps)
    assert table.converged
    lo, hi = table.trace["delta_low"], table.trace["delta_high"]
    tol = 1e-9 * np.maximum(1.0, np.abs(hi))
    assert np.all(np.diff(lo) >= -tol[1:]) and np.all(np.diff(hi) <= tol[1:])
    assert np.all(lo <= hi)
    assert table.span_low <= table.gain <= table.span_high
    assert table.h[table.reference] == 0.0
    assert bellman_residual(table) <= eps
    assert policy.actions.min() >= 0 and policy.actions.max() < spec.num_sensors


def test_gain_of_always_fresh_source_matches_simulation():
    spec = make_spec([1.0], [([[1.0]], [[1.0]])])
    table, _ = relative_value_iteration(spec, 5)
    assert table.gain == pytest.approx(1.0, abs=1e-9)
    stats = run_episode(spec, PolicyHandle.optimal(table), 1000, 10, seed=1)
    assert stats.mean_aoi_overall == 1.0


def test_non_convergence_is_flagged():
    table, _ = relative_value_iteration(scenario_toy("b", 0.6, 0.4), 30, epsilon=1e-12, max_iters=3)
    assert not table.converged
    assert table.iterations == 3


def test_invalid_arguments():
    spec = scenario_toy("a", 0.5)
    with pytest.raises(ValueError):
        relative_value_iteration(spec, 5, epsilon=0.0)
    with pytest.raises(ValueError):
        relative_value_iteration(spec, 5, aperiodicity=0.0)


def test_periodic_instance_needs_and_gets_restriction():
    spec, init = scenario_motivating()
    ref = SystemState(init.source_states, (8, 8, 8))
    table, _ = relative_value_iteration(spec, 8, reference=ref, aperiodicity=0.5)
    assert table.converged
    assert table.mask is not None and table.mask.sum() == 5 * 8**3


# -- greedy and myopic ---------------------------------------------------------


def test_greedy_is_shift_invariant():
    spec = scenario_toy("b", 0.6, 0.4)
    table, policy = relative_value_iteration(spec, 25)
    shifted = greedy_policy(table.space, table.h + 17.0)
    np.testing.assert_array_equal(shifted.actions, policy.actions)


def test_greedy_of_zero_is_myopic():
    space = StateSpace(scenario_toy("c", 0.4, 0.3), 8)
    greedy = greedy_policy(space, np.zeros(space.num_states)).actions
    np.testing.assert_array_equal(greedy, myopic_table(space))
    for i in range(0, space.num_states, 7):
        assert greedy[i] == myopic_action(space.spec, space.decode(i))


def test_symmetric_tie_goes_to_first_sensor():
    spec = make_spec([1.0, 1.0], [([[1.0]], [[0.5], [0.0]]), ([[1.0]], [[0.0], [0.5]])])
    table, policy = relative_value_iteration(spec, 15)
    for d in range(1, 16):
        assert policy.action(SystemState((0, 0), (d, d))) == 0


def test_myopic_hand_examples():
    assert myopic_action(scenario_toy("a", 0.9), SystemState((0, 0), (5, 1))) == 0
    assert myopic_action(scenario_toy("a", 0.4), SystemState((0, 0), (2, 2))) == 2
    blind = scenario_small_factory(0.1, 0.5)
    assert myopic_action(blind, SystemState((2, 2, 2), (9, 4, 7))) == 0


def test_toy_b_optimal_differs_from_myopic():
    spec = scenario_toy("b", 0.6, 0.4)
    table, policy = relative_value_iteration(spec, 60)
    assert np.any(policy.actions != myopic_table(table.space))


def test_truncation_stability_toy_a():
    spec = scenario_toy("a", 0.9)
    _, small = relative_value_iteration(spec, 40)
    _, large = relative_value_iteration(spec, 80)
    for d1, d2 in itertools.product(range(1, 21), repeat=2):
        state = SystemState((0, 0), (d1, d2))
        assert small.action(state) == large.action(state)


# -- monotonicity ----------------------------------------------------------------


@pytest.mark.parametrize("spec", [scenario_toy("a", 0.7), scenario_toy("b", 0.6, 0.4), scenario_toy("c", 0.3, 0.6)])
def test_discounted_values_are_monotone(spec):
    assert verify_monotonicity(StateSpace(spec, 15), 0.9, 200).ok


def test_minimal_instance_is_monotone():
    spec = make_spec([1.0], [([[1.0]], [[0.5]]), ([[1.0]], [[0.5]])])
    assert verify_monotonicity(StateSpace(spec, 2), 0.9, 200).ok


def test_monotonicity_detector_reports_violation():
    space = StateSpace(scenario_toy("a", 0.5), 3)
    values = np.zeros(space.num_states)
    values[space.encode(SystemState((0, 0), (2, 1)))] = 5.0
    report = verify_monotonicity(space, values=values)
    assert not report.ok
    assert report.violation == (SystemState((0, 0), (2, 1)), SystemState((0, 0), (3, 1)))


def test_argmin_lowest_tolerance():
    assert argmin_lowest(np.array([1.0 + 1e-12, 1.0, 2.0])) == 0
    assert argmin_lowest(np.array([1.0 + 1e-6, 1.0])) == 1
