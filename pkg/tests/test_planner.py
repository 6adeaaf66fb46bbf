from __future__ import annotations

import math

import numpy as np
import pytest

from storyopt.inference import Hypothesis, build_hypothesis_space
from storyopt.planner import (
    ConvergenceError,
    PlannerConfig,
    action_likelihood,
    build_policy_cache,
    cheese_operator,
    load_cache,
    plan_cheese,
    plan_robot,
    robot_operator,
    save_cache,
    softmax_policy,
    value_iteration,
)
from storyopt.world import (
    Action,
    Cell,
    RewardParams,
    WorldState,
    _enumerate_restricted,
    enumerate_states,
    parse_layout,
)

GAMMA = 0.99
STAY_ONLY = np.array([0.0, 0.0, 0.0, 0.0, 1.0])


# --- closed-form corridor oracle --------------------------------------------
#
# 1x3 corridor P.G with the robot parked on pink (stay-only marginal) and
# the cheese heading for green.  With move success 0.6 the cheese values
# form a 2-state chain solvable by hand:
#   V(goal)     = 1 / (1 - gamma)                          = 100
#   V(adjacent) = (-0.1 + 0.6 * (1 + gamma * 100)) / (1 - 0.4 * gamma)


def test_corridor_chain_closed_form(corridor_layout):
    q, v = plan_cheese(
        corridor_layout, "green", robot_marginal=STAY_ONLY
    )
    space = enumerate_states(corridor_layout)
    v_goal = 1.0 / (1.0 - GAMMA)
    v_adj = (-0.1 + 0.6 * (1.0 + GAMMA * v_goal)) / (1.0 - 0.4 * GAMMA)
    s_adj = space.index_of(WorldState(robot=Cell(0, 0), cheese=Cell(1, 0)))
    s_goal = space.index_of(WorldState(robot=Cell(0, 0), cheese=Cell(2, 0)))
    assert v[s_goal] == pytest.approx(v_goal, abs=2e-4)
    assert v[s_adj] == pytest.approx(v_adj, abs=2e-4)
    assert q[s_adj].argmax() == Action.EAST
    assert q[s_goal].argmax() == Action.STAY


def test_cheese_on_goal_stays(mini_layout, mini_cache):
    q, v = mini_cache.cheese_plans["green"]
    space = mini_cache.space
    on_goal = [
        i
        for i in range(space.n_states)
        if space.state_of(i).cheese == mini_layout.green
    ]
    assert np.all(v[on_goal] <= 100.0 + 1e-6)
    for s in on_goal:
        assert q[s, Action.STAY] == pytest.approx(v[s])
        assert np.all(q[s, Action.STAY] >= q[s] - 1e-12)


def test_goalless_indifferent_robot_is_idle(mini_layout):
    h = Hypothesis("pink", None, 0, True, True)
    uniform = np.full((enumerate_states(mini_layout).n_states, 5), 0.2)
    q, v = plan_robot(mini_layout, h, uniform)
    assert np.all(np.abs(v) <= 1e-4)
    assert np.all(q[:, Action.STAY] >= q.max(axis=1) - 1e-9)
    assert np.all(q[:, : Action.STAY] <= -0.1 + 1e-4)


# --- Monte-Carlo oracle for the helpful robot --------------------------------


def _mc_q_estimate(cache, hypothesis, s0, first_action, n_rollouts, horizon, seed):
    """Estimate Q(s0, a) by rolling the greedy robot against the cheese policy."""
    space = cache.space
    params = cache.params
    h = cache.hypothesis_index(hypothesis)
    robot_greedy = cache.robot_plans[
        (("softmax", hypothesis.g_cheese), hypothesis.g_robot, hypothesis.rho)
    ][0].argmax(axis=1)
    cheese_probs = cache.cheese_probs[h]
    cheese_cum = cheese_probs.cumsum(axis=1)
    nxt = space.transition_tensor()
    goal_cell = (
        space.layout.pink if hypothesis.g_cheese == "pink" else space.layout.green
    )
    cheese_on_goal = cache.space.on_tile(goal_cell)[space.cheese_cell_index]
    rng = np.random.default_rng(seed)

    states = np.full(n_rollouts, s0, dtype=np.int64)
    returns = np.zeros(n_rollouts)
    discount = 1.0
    for t in range(horizon):
        ra = (
            np.full(n_rollouts, int(first_action))
            if t == 0
            else robot_greedy[states]
        )
        u = rng.random(n_rollouts)
        ca = (cheese_cum[states] < u[:, None]).sum(axis=1)
        success = rng.random(n_rollouts) < 0.6
        states_next = nxt[states, ra, ca, np.where(success, 0, 1)]
        r_cheese = params.goal_reward * cheese_on_goal[states_next] - (
            params.move_cost * (ca != Action.STAY)
        )
        r_robot = -params.move_cost * (ra != Action.STAY) + hypothesis.rho * r_cheese
        # hypothesis.g_robot is None in this scenario: no own-goal term
        returns += discount * r_robot
        discount *= GAMMA
        states = states_next
    return returns


def test_robot_clears_table_for_blocked_cheese():
    # pink (cheese goal) is covered by the table; the robot can push it off.
    layout = parse_layout("..G\n..P\n...\n")
    cache = build_policy_cache(layout, workers=1)
    h = Hypothesis("pink", None, 3, True, True)
    state = WorldState(robot=Cell(2, 0), cheese=Cell(1, 1), table=Cell(2, 1))
    s0 = cache.space.index_of(state)
    entry = cache.entry(h)
    q = entry.robot_q
    assert q[s0, Action.SOUTH] > q[s0, Action.STAY]

    returns = _mc_q_estimate(
        cache, h, s0, Action.SOUTH, n_rollouts=1500, horizon=1200, seed=11
    )
    mc = returns.mean()
    stderr = returns.std(ddof=1) / math.sqrt(len(returns))
    assert abs(mc - q[s0, Action.SOUTH]) <= 4 * stderr + 0.05


# --- convergence and Bellman invariants ---------------------------------------


def test_bellman_residual_and_consistency(mini_cache):
    space = mini_cache.space
    config = mini_cache.config
    for key in list(mini_cache.robot_plans)[:3]:
        q, v = mini_cache.robot_plans[key]
        assert np.array_equal(q.max(axis=1), v)
        model = key[0]
        if model[0] == "softmax":
            policy = softmax_policy(mini_cache.cheese_plans[model[1]][0], config.beta)
        else:
            policy = np.full((space.n_states, 5), 0.2)
        op = robot_operator(space, policy)
        h = Hypothesis(
            g_cheese=model[1] if model[0] == "softmax" else "pink",
            g_robot=key[1],
            rho=key[2],
            r_robot=True,
            r_cheese=model[0] == "softmax",
        )
        from storyopt.planner import _robot_reward

        er = _robot_reward(space, op, h, policy, mini_cache.params)
        tv = (er + config.gamma * (op @ v).reshape(space.n_states, 5)).max(axis=1)
        assert np.max(np.abs(tv - v)) <= config.residual_tol


def test_convergence_error_reports_residual(corridor_layout):
    config = PlannerConfig(max_iterations=3)
    with pytest.raises(ConvergenceError, match="residual"):
        plan_cheese(corridor_layout, "green", config=config)


def test_cache_build_names_failing_plan(corridor_layout):
    config = PlannerConfig(max_iterations=3)
    with pytest.raises(ConvergenceError, match="cheese plan"):
        build_policy_cache(corridor_layout, config=config, workers=1)


# --- action likelihood ---------------------------------------------------------


def test_softmax_closed_form():
    probs = softmax_policy(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]]), beta=2.0)
    e2 = math.exp(2.0)
    assert probs[0, 0] == pytest.approx(e2 / (e2 + 4.0), abs=1e-12)
    assert np.allclose(probs[0, 1:], 1.0 / (e2 + 4.0), atol=1e-12)


def test_flat_beta_limit(micro_layout):
    cache = build_policy_cache(
        micro_layout, config=PlannerConfig(beta=1e-9), workers=1
    )
    state = WorldState(Cell(0, 1), Cell(1, 1))
    h = cache.hypotheses[0]
    for action in Action:
        assert action_likelihood(cache, h, "robot", state, action) == pytest.approx(
            0.2, abs=1e-6
        )


def test_irrational_agents_are_uniform(mini_cache):
    both = Hypothesis("pink", None, 0, False, False)
    state = WorldState(Cell(0, 1), Cell(1, 1))
    for agent in ("robot", "cheese"):
        for action in Action:
            assert action_likelihood(mini_cache, both, agent, state, action) == 0.2


def test_unknown_hypothesis_rejected(mini_cache):
    fake = Hypothesis("pink", "green", 1, True, True)
    # remove it from a copy of the index to simulate a foreign hypothesis
    import copy

    cache = copy.copy(mini_cache)
    cache._hyp_index = {h: i for h, i in cache._hyp_index.items() if h != fake}
    with pytest.raises(KeyError, match="hypothesis not in cache"):
        action_likelihood(cache, fake, "robot", WorldState(Cell(0, 1), Cell(1, 1)), Action.STAY)


def test_likelihoods_sum_to_one(mini_cache):
    assert np.allclose(mini_cache.robot_probs.sum(axis=2), 1.0, atol=1e-12)
    assert np.allclose(mini_cache.cheese_probs.sum(axis=2), 1.0, atol=1e-12)


def test_argmax_likelihood_monotone_in_beta(mini_cache):
    q = mini_cache.robot_plans[(("softmax", "pink"), "green", 3)][0]
    rng = np.random.default_rng(5)
    rows = q[rng.choice(len(q), size=50, replace=False)]
    rows = np.vstack([rows, rng.normal(size=(20, 5))])
    last = None
    for beta in (0.5, 2.0, 8.0):
        probs = softmax_policy(rows, beta)
        top = probs[np.arange(len(rows)), rows.argmax(axis=1)]
        if last is not None:
            assert np.all(top >= last - 1e-12)
        last = top


def test_helpful_vs_adversarial_values_differ(mini_cache, mini_layout):
    v_help = mini_cache.robot_plans[(("softmax", "green"), None, 3)][1]
    v_hinder = mini_cache.robot_plans[(("softmax", "green"), None, -3)][1]
    space = mini_cache.space
    en_route = [
        i
        for i in range(space.n_states)
        if space.state_of(i).cheese in (Cell(2, 1), Cell(1, 2))
        and space.state_of(i).table is None
    ]
    assert np.all(v_help[en_route] > v_hinder[en_route])


# --- cache assembly ------------------------------------------------------------


def test_cache_covers_space(mini_cache):
    assert mini_cache.n_hypotheses == 36
    assert len(mini_cache.robot_plans) == 33
    assert len(mini_cache.cheese_plans) == 2
    for h in mini_cache.hypotheses:
        entry = mini_cache.entry(h)
        assert (entry.robot_q is None) == (not h.r_robot)
        assert (entry.cheese_q is None) == (not h.r_cheese)


def test_cache_rebuild_bit_identical(micro_layout, micro_cache):
    again = build_policy_cache(micro_layout, workers=1)
    assert np.array_equal(again.robot_probs, micro_cache.robot_probs)
    assert np.array_equal(again.cheese_probs, micro_cache.cheese_probs)
    nan_safe = np.nan_to_num
    assert np.array_equal(
        nan_safe(again.robot_values), nan_safe(micro_cache.robot_values)
    )


def test_cache_save_load_roundtrip(tmp_path, micro_cache, micro_layout):
    path = tmp_path / "micro.cache"
    save_cache(micro_cache, path)
    loaded = load_cache(path, micro_layout)
    assert loaded.hypotheses == micro_cache.hypotheses
    assert np.array_equal(loaded.robot_probs, micro_cache.robot_probs)
    assert loaded.cache_hash() == micro_cache.cache_hash()

    again = tmp_path / "again.cache"
    save_cache(micro_cache, again)
    assert path.read_bytes() == again.read_bytes()

    other = parse_layout("P..\n..G\n")
    with pytest.raises(ValueError, match="different layout"):
        load_cache(path, other)


def test_parallel_build_matches_serial(micro_layout, micro_cache):
    parallel = build_policy_cache(micro_layout, workers=2)
    assert np.array_equal(parallel.robot_probs, micro_cache.robot_probs)


def test_table_absent_component_is_closed(mini_layout):
    """VI over the full space agrees with VI restricted to table-present states."""
    full_space = enumerate_states(mini_layout)
    q_full, _ = plan_cheese(full_space, "green")
    restricted = _enumerate_restricted(mini_layout, table_absent_only=False)
    q_restr, _ = plan_cheese(restricted, "green")
    rng = np.random.default_rng(2)
    for i in rng.choice(restricted.n_states, size=60, replace=False):
        state = restricted.state_of(int(i))
        assert state.table is not None
        j = full_space.index_of(state)
        assert np.allclose(q_restr[int(i)], q_full[j], atol=5e-4)
