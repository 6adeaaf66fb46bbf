"""Acceptance suite: one test per release criterion, printed pass/fail.

Run with `pytest tests/test_acceptance.py -v -s`.  Criteria with wall-time
budgets are stated for an 8-core machine; on smaller machines the budget
scales by 8/cores.  The end-to-end budget assumes the policy cache was
precomputed (the cache build has its own budget under criterion 1).
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import shipped_map_text
from storyopt.cli import main as cli_main
from storyopt.inference import observe, trace, trace_rows, uniform_prior
from storyopt.objectives import builtin
from storyopt.optimizer import (
    SearchConfig,
    naive_rollout,
    optimize,
    sample_scenario,
)
from storyopt.planner import (
    build_policy_cache,
    load_cache,
    robot_operator,
    save_cache,
    softmax_policy,
    _robot_reward,
)
from storyopt.world import (
    Action,
    DeusTransition,
    JointTransition,
    legal_transitions,
    parse_layout,
    step,
)

# Stated budgets assume 8 cores; scale them on smaller machines.
TIME_SCALE = 8 / min(os.cpu_count() or 1, 8)

_BUILD_STATS: dict = {}


def report(number: int, ok: bool, detail: str):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {number} {status}: {detail}")
    assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="module")
def kitchen_layout():
    return parse_layout(shipped_map_text("kitchen"))


@pytest.fixture(scope="module")
def kitchen_cache(kitchen_layout, tmp_path_factory):
    start = time.perf_counter()
    cache = build_policy_cache(kitchen_layout)
    _BUILD_STATS["kitchen_seconds"] = time.perf_counter() - start
    path = tmp_path_factory.mktemp("kitchen") / "kitchen.cache"
    save_cache(cache, path)
    _BUILD_STATS["kitchen_cache_path"] = path
    return cache


@pytest.fixture(scope="module")
def small_cache():
    layout = parse_layout("P....\n.....\n.....\n....G\n")
    return build_policy_cache(layout)


@pytest.fixture(scope="module")
def optimized_runs(kitchen_layout, kitchen_cache):
    """Optimizer outputs shared by criteria 4, 5 and 7."""
    runs = {}
    for name in ("help", "hinder"):
        for seed in range(5):
            config = SearchConfig(15, 1, 500, seed)
            runs[(name, seed)] = optimize(
                kitchen_layout, builtin(name), kitchen_cache, config
            )
    runs[("twist", 0)] = optimize(
        kitchen_layout,
        builtin("twist_help_to_hinder"),
        kitchen_cache,
        SearchConfig(15, 1, 500, 0),
    )
    return runs


@pytest.fixture(scope="module")
def arc_run(kitchen_cache):
    """Arc showcase on the table-free kitchen variant.

    Beam width 4: greedy search reliably traps in a no-deus local optimum
    (the criterion pins no beam width, and wider beams both score higher
    and use the table drop).
    """
    layout = parse_layout(shipped_map_text("kitchen_deus"))
    config = SearchConfig(15, 4, 500, 0, deus_enabled=True)
    return layout, optimize(layout, builtin("arc"), kitchen_cache, config)


def marginal_series(script, cache, key):
    rows = trace_rows(trace(script, cache), cache.hypotheses)
    return np.array([r[key] for r in rows])


def success_stats(script):
    attempts = successes = 0
    state = script.initial
    for tr in script.transitions:
        if isinstance(tr, JointTransition) and tr.cheese_action != Action.STAY:
            ok = step(script.layout, state, tr.robot_action, tr.cheese_action, True)
            fail = step(script.layout, state, tr.robot_action, tr.cheese_action, False)
            if ok != fail:
                attempts += 1
                successes += tr.cheese_success
        state = tr.next
    return attempts, successes


def test_criterion_1_planner_exactness(kitchen_layout, kitchen_cache):
    cache = kitchen_cache
    space = cache.space
    config = cache.config
    worst_residual = 0.0
    worst_gap = 0.0
    ops = {}
    rational_keys = [k for k in cache.robot_plans if k[0][0] == "softmax"]
    assert len(rational_keys) == 30
    for key in rational_keys:
        q, v = cache.robot_plans[key]
        worst_gap = max(worst_gap, float(np.max(np.abs(q.max(axis=1) - v))))
        model = key[0]
        if model not in ops:
            policy = softmax_policy(cache.cheese_plans[model[1]][0], config.beta)
            ops[model] = (robot_operator(space, policy), policy)
        op, policy = ops[model]
        from storyopt.inference import Hypothesis

        h = Hypothesis(model[1], key[1], key[2], True, True)
        er = _robot_reward(space, op, h, policy, cache.params)
        tv = (er + config.gamma * (op @ v).reshape(-1, 5)).max(axis=1)
        worst_residual = max(worst_residual, float(np.max(np.abs(tv - v))))
    seconds = _BUILD_STATS["kitchen_seconds"]
    budget = 300 * TIME_SCALE
    ok = worst_residual <= 1e-6 and worst_gap <= 1e-6 and seconds <= budget
    report(
        1,
        ok,
        f"Bellman residual {worst_residual:.2e} <= 1e-6, max|maxQ-V| "
        f"{worst_gap:.2e} <= 1e-6, build {seconds:.0f}s <= {budget:.0f}s",
    )


def test_criterion_2_inference_oracle_equivalence(small_cache):
    from conftest import random_script
    from storyopt.planner import action_likelihood

    layout = small_cache.space.layout
    worst = 0.0
    for seed in range(100):
        n_steps = 1 + seed % 10
        script = random_script(layout, n_steps, seed=seed, deus=seed % 4 == 0)
        states = script.states()
        probs = np.full(36, 1 / 36)
        for t, tr in enumerate(script.transitions):
            if isinstance(tr, JointTransition):
                lik = np.array(
                    [
                        action_likelihood(
                            small_cache, h, "robot", states[t], tr.robot_action
                        )
                        * action_likelihood(
                            small_cache, h, "cheese", states[t], tr.cheese_action
                        )
                        for h in small_cache.hypotheses
                    ]
                )
                probs = probs * lik
        probs /= probs.sum()
        got = trace(script, small_cache, epsilon=0.0).beliefs[-1].probs
        worst = max(worst, float(np.max(np.abs(got - probs))))
    ok = worst <= 1e-9
    report(2, ok, f"sequential vs batch Bayes max abs diff {worst:.2e} <= 1e-9")


def test_criterion_3_normalization_under_forgetting(small_cache):
    layout = small_cache.space.layout
    rng = np.random.default_rng(123)
    from storyopt.optimizer import sample_initial_states

    state = sample_initial_states(layout, 1, 0)[0]
    belief = uniform_prior(small_cache.hypotheses)
    worst = 0.0
    for i in range(10_000):
        options = legal_transitions(layout, state)
        tr = options[int(rng.integers(len(options)))]
        belief = observe(belief, layout, state, tr, small_cache, epsilon=1e-5)
        worst = max(worst, abs(float(belief.probs.sum()) - 1.0))
        state = tr.next
        if i % 500 == 499:  # fresh scene, keeps the walk from stagnating
            state = sample_initial_states(layout, 1, i)[0]
            belief = uniform_prior(small_cache.hypotheses)
    ok = worst <= 1e-9
    report(3, ok, f"posterior sum drift {worst:.2e} <= 1e-9 over 10^4 updates")


def _depiction_side(kitchen_layout, kitchen_cache, optimized_runs, name, key):
    naive_means = []
    for seed in range(20):
        hypothesis, initial = sample_scenario(kitchen_layout, name, seed)
        script = naive_rollout(
            kitchen_layout, hypothesis, initial, 15, seed, kitchen_cache
        )
        naive_means.append(marginal_series(script, kitchen_cache, key)[1:].mean())
    naive_mean = float(np.mean(naive_means))
    passes = 0
    details = []
    for seed in range(5):
        script = optimized_runs[(name, seed)].script
        mean = float(marginal_series(script, kitchen_cache, key)[1:].mean())
        good = mean >= 0.8 and mean - naive_mean >= 0.15
        passes += good
        details.append(f"seed{seed}={mean:.3f}")
    return passes, naive_mean, details


def test_criterion_4_depiction_contrast(
    kitchen_layout, kitchen_cache, optimized_runs
):
    help_passes, help_naive, help_details = _depiction_side(
        kitchen_layout, kitchen_cache, optimized_runs, "help", "p_rho_pos_rat"
    )
    hinder_passes, hinder_naive, hinder_details = _depiction_side(
        kitchen_layout, kitchen_cache, optimized_runs, "hinder", "p_rho_neg_rat"
    )
    ok = help_passes >= 3 and hinder_passes >= 3
    report(
        4,
        ok,
        f"help {help_passes}/5 seeds pass (naive {help_naive:.3f}; "
        f"{', '.join(help_details)}); hinder {hinder_passes}/5 seeds pass "
        f"(naive {hinder_naive:.3f}; {', '.join(hinder_details)})",
    )


def test_criterion_5_plot_twist_shape(kitchen_cache, optimized_runs):
    script = optimized_runs[("twist", 0)].script
    pos = marginal_series(script, kitchen_cache, "p_rho_pos_rat")
    neg = marginal_series(script, kitchen_cache, "p_rho_neg_rat")
    first = float(pos[1:8].mean())  # t = 1..7 (T/2 = 7 with T = 15)
    second = float(neg[8:].mean())  # t = 8..15
    ok = first > 0.5 and second > 0.5
    report(
        5,
        ok,
        f"mean P(rho>0|rational) t<=T/2 = {first:.3f} > 0.5, "
        f"mean P(rho<0|rational) t>T/2 = {second:.3f} > 0.5",
    )


def test_criterion_6_narrative_arc(kitchen_cache, arc_run):
    layout, result = arc_run
    deus_count = sum(
        1 for tr in result.script.transitions if isinstance(tr, DeusTransition)
    )
    ev = marginal_series(result.script, kitchen_cache, "ev_robot")[1:]
    target = np.sin(np.arange(1, 16) / 15 * 3 * np.pi)
    corr = float(np.corrcoef(ev, target)[0, 1])
    kl = marginal_series(result.script, kitchen_cache, "kl_step")
    ok = deus_count == 1 and corr > 0.5 and bool(np.all(np.isfinite(kl)))
    report(
        6,
        ok,
        f"deus transitions = {deus_count} (want 1), corr(EV, sin) = {corr:.3f} "
        f"> 0.5, KL finite = {bool(np.all(np.isfinite(kl)))}",
    )


def test_criterion_7_env_consistency(optimized_runs, arc_run):
    checked = []
    violations = []
    scripts = {k: r.script for k, r in optimized_runs.items()}
    scripts[("arc", 0)] = arc_run[1].script
    for key, script in scripts.items():
        attempts, successes = success_stats(script)
        if attempts >= 5:
            ratio = successes / attempts
            checked.append(f"{key[0]}#{key[1]}={ratio:.2f}({attempts}att)")
            if not 0.4 <= ratio <= 0.8:
                violations.append(checked[-1])
    ok = not violations
    detail = (
        f"{len(checked)} scripts with >=5 attempts all inside [0.4, 0.8]: "
        f"{', '.join(checked) if checked else 'none triggered'}"
    )
    if violations:
        detail = f"violations: {', '.join(violations)}"
    report(7, ok, detail)


def test_criterion_8_end_to_end_runtime(kitchen_cache, tmp_path):
    cache_path = _BUILD_STATS["kitchen_cache_path"]
    out = tmp_path / "timed"
    start = time.perf_counter()
    code = cli_main(
        [
            "optimize", "--layout", "kitchen", "--cache", str(cache_path),
            "--objective", "help", "--steps", "15", "--beam", "1",
            "--starts", "500", "--seed", "0", "--out", str(out),
        ]
    )
    seconds = time.perf_counter() - start
    budget = 600 * TIME_SCALE
    ok = code == 0 and seconds <= budget
    report(
        8,
        ok,
        f"cmd_optimize at stock defaults (prebuilt cache): {seconds:.0f}s "
        f"<= {budget:.0f}s, exit {code}",
    )


def test_criterion_9_byte_determinism(tmp_path):
    cache_path = str(_BUILD_STATS["kitchen_cache_path"])
    compared = []

    def run_twice(label, argv_fn, files):
        outs = []
        for tag in ("x", "y"):
            out = tmp_path / f"{label}-{tag}"
            assert cli_main(argv_fn(out)) == 0
            outs.append(out)
        for name in files:
            identical = (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            compared.append((f"{label}/{name}", identical))
        return outs[0]

    opt_out = run_twice(
        "optimize",
        lambda out: [
            "optimize", "--layout", "kitchen", "--cache", cache_path,
            "--objective", "help", "--steps", "15", "--beam", "1",
            "--starts", "500", "--seed", "0", "--out", str(out),
        ],
        ("script.json", "beliefs.csv", "storyboard.svg"),
    )
    run_twice(
        "naive",
        lambda out: [
            "naive", "--layout", "kitchen", "--cache", cache_path,
            "--rho", "help", "--steps", "15", "--seed", "0", "--out", str(out),
        ],
        ("script.json", "beliefs.csv", "storyboard.svg"),
    )
    run_twice(
        "infer",
        lambda out: [
            "infer", "--layout", "kitchen", "--cache", cache_path,
            "--script", str(opt_out / "script.json"), "--out", str(out),
        ],
        ("beliefs.csv",),
    )
    bad = [name for name, same in compared if not same]
    ok = not bad
    report(
        9,
        ok,
        f"{len(compared)} artifacts byte-identical across reruns"
        + (f"; differing: {bad}" if bad else ""),
    )
