"""Per-hypothesis planning: value iteration, softmax policies, policy cache.

Planning is two-level: the cheese plans against a robot that moves
uniformly at random, and the robot plans against the cheese's resulting
softmax policy.  Both levels are solved exactly by synchronous value
iteration over the full state space, using sparse expected-transition
operators so a sweep is a single matrix-vector product.

Deus events are deliberately absent from the transition model: the
characters' policies do not anticipate them.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .inference import Hypothesis, build_hypothesis_space
from .world import (
    Action,
    CHEESE_MOVE_SUCCESS,
    N_ACTIONS,
    RewardParams,
    StateSpace,
    WorldLayout,
    WorldState,
    enumerate_states,
    layout_to_text,
    parse_layout,
)

CACHE_MAGIC = b"STORYOPTCACHE1\n"


class ConvergenceError(RuntimeError):
    """Value iteration failed to reach the residual tolerance."""


@dataclass(frozen=True)
class PlannerConfig:
    gamma: float = 0.99
    beta: float = 2.0
    residual_tol: float = 1e-6
    max_iterations: int = 2000

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.beta <= 0 or self.residual_tol <= 0 or self.max_iterations <= 0:
            raise ValueError("beta, residual_tol and max_iterations must be positive")


def softmax_policy(q: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise softmax of beta*q; rows are states, columns actions."""
    z = beta * q
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_space(layout) -> StateSpace:
    if isinstance(layout, StateSpace):
        return layout
    return enumerate_states(layout)


_SUCCESS_WEIGHTS = np.array([CHEESE_MOVE_SUCCESS, 1.0 - CHEESE_MOVE_SUCCESS])
_MOVE_INDICATOR = np.array([1.0, 1.0, 1.0, 1.0, 0.0])  # STAY is free


def cheese_operator(space: StateSpace, robot_marginal: np.ndarray) -> sp.csr_matrix:
    """Expected transition operator for the cheese's MDP.

    Rows are (state, cheese action) pairs; the robot is marginalized out
    with `robot_marginal` and the cheese's own move succeeds with
    probability 0.6.
    """
    nxt = space.transition_tensor()
    n = space.n_states
    cols = np.ascontiguousarray(nxt.transpose(0, 2, 1, 3)).reshape(n * N_ACTIONS, 10)
    w = np.outer(robot_marginal, _SUCCESS_WEIGHTS).ravel()
    data = np.tile(w, n * N_ACTIONS)
    rows = np.repeat(np.arange(n * N_ACTIONS, dtype=np.int64), 10)
    return sp.csr_matrix((data, (rows, cols.ravel())), shape=(n * N_ACTIONS, n))


def robot_operator(space: StateSpace, cheese_policy: np.ndarray) -> sp.csr_matrix:
    """Expected transition operator for the robot's MDP.

    Rows are (state, robot action) pairs; the cheese's action is drawn
    from `cheese_policy` (a (states, 5) stochastic matrix) and its move
    succeeds with probability 0.6.
    """
    nxt = space.transition_tensor()
    n = space.n_states
    cols = nxt.reshape(n * N_ACTIONS, 10)
    w = (cheese_policy[:, :, None] * _SUCCESS_WEIGHTS[None, None, :]).reshape(n, 10)
    data = np.repeat(w, N_ACTIONS, axis=0)
    rows = np.repeat(np.arange(n * N_ACTIONS, dtype=np.int64), 10)
    return sp.csr_matrix(
        (data.ravel(), (rows, cols.ravel())), shape=(n * N_ACTIONS, n)
    )


def value_iteration(
    op: sp.csr_matrix, expected_reward: np.ndarray, config: PlannerConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Synchronous full-sweep value iteration to the residual tolerance.

    Returns (q, v) with v = max_a q exactly; the Bellman residual of v is
    bounded by gamma times the stopping residual.
    """
    n, a = expected_reward.shape
    v = np.zeros(n)
    residual = np.inf
    for _ in range(config.max_iterations):
        q = expected_reward + config.gamma * (op @ v).reshape(n, a)
        v_new = q.max(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual <= config.residual_tol:
            return q, v
    raise ConvergenceError(
        f"no convergence in {config.max_iterations} iterations "
        f"(final residual {residual:.3e}, tolerance {config.residual_tol:.1e})"
    )


def _goal_indicator(space: StateSpace, entity: str, tile: str) -> np.ndarray:
    cell = space.layout.pink if tile == "pink" else space.layout.green
    on = space.on_tile(cell)
    idx = space.cheese_cell_index if entity == "cheese" else space.robot_cell_index
    return on[idx]


def plan_cheese(
    layout,
    g_cheese: str,
    params: RewardParams = RewardParams(),
    config: PlannerConfig = PlannerConfig(),
    robot_marginal: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Value-iterate the cheese's MDP for one goal tile.

    `robot_marginal` overrides the uniform-random robot model (used by
    closed-form tests); it must be a length-5 distribution.
    """
    space = _as_space(layout)
    if robot_marginal is None:
        robot_marginal = np.full(N_ACTIONS, 1.0 / N_ACTIONS)
    op = cheese_operator(space, np.asarray(robot_marginal, dtype=np.float64))
    er = _cheese_reward(space, op, g_cheese, params)
    return value_iteration(op, er, config)


def _cheese_reward(space, op, g_cheese, params) -> np.ndarray:
    n = space.n_states
    exp_goal = (op @ _goal_indicator(space, "cheese", g_cheese)).reshape(n, N_ACTIONS)
    return params.goal_reward * exp_goal - params.move_cost * _MOVE_INDICATOR[None, :]


def plan_robot(
    layout,
    hypothesis: Hypothesis,
    cheese_policy: np.ndarray,
    params: RewardParams = RewardParams(),
    config: PlannerConfig = PlannerConfig(),
    transition_op: Optional[sp.csr_matrix] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Value-iterate the robot's MDP against a fixed cheese policy.

    The robot's reward adds rho times the cheese's full per-turn reward
    (goal bonus minus its move cost) to its own goal/move terms.
    """
    space = _as_space(layout)
    op = transition_op
    if op is None:
        op = robot_operator(space, cheese_policy)
    er = _robot_reward(space, op, hypothesis, cheese_policy, params)
    return value_iteration(op, er, config)


def _robot_reward(space, op, hypothesis, cheese_policy, params) -> np.ndarray:
    n = space.n_states
    er = -params.move_cost * np.tile(_MOVE_INDICATOR, (n, 1))
    if hypothesis.g_robot is not None:
        exp_goal = (op @ _goal_indicator(space, "robot", hypothesis.g_robot)).reshape(
            n, N_ACTIONS
        )
        er += params.goal_reward * exp_goal
    if hypothesis.rho != 0:
        exp_cheese_goal = (
            op @ _goal_indicator(space, "cheese", hypothesis.g_cheese)
        ).reshape(n, N_ACTIONS)
        exp_cheese_cost = params.move_cost * (1.0 - cheese_policy[:, Action.STAY])
        er += hypothesis.rho * (
            params.goal_reward * exp_cheese_goal - exp_cheese_cost[:, None]
        )
    return er


# --- plan keys -------------------------------------------------------------
#
# Planning work is shared across hypotheses: the cheese's plan depends only
# on its goal, and the robot's plan on (cheese model, robot goal, rho).

def cheese_model_of(h: Hypothesis) -> tuple:
    return ("softmax", h.g_cheese) if h.r_cheese else ("uniform",)


def robot_plan_key(h: Hypothesis) -> Optional[tuple]:
    if not h.r_robot:
        return None
    return (cheese_model_of(h), h.g_robot, h.rho)


def _encode_key(key: tuple) -> str:
    model = ":".join(key[0])
    return f"{model}|{key[1] or 'none'}|{key[2]}"


@dataclass
class PolicyEntry:
    """Per-hypothesis view of the cache; irrational agents have no tables."""

    cheese_q: Optional[np.ndarray]
    cheese_v: Optional[np.ndarray]
    robot_q: Optional[np.ndarray]
    robot_v: Optional[np.ndarray]


@dataclass
class PolicyCache:
    """Immutable planning results covering an entire hypothesis space.

    robot_probs/cheese_probs hold the per-hypothesis action distributions
    (softmax of the Q-tables, or exactly 0.2 for irrational agents) and
    robot_values the robot value functions (NaN rows where the robot is
    unplanned).
    """

    space: StateSpace
    hypotheses: list[Hypothesis]
    params: RewardParams
    config: PlannerConfig
    cheese_plans: dict
    robot_plans: dict
    robot_probs: np.ndarray = field(repr=False, default=None)
    cheese_probs: np.ndarray = field(repr=False, default=None)
    robot_values: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.robot_probs is None:
            self._build_derived()
        self._hyp_index = {h: i for i, h in enumerate(self.hypotheses)}
        self.rational_mask = np.fromiter(
            (h.rational_pair for h in self.hypotheses), bool, len(self.hypotheses)
        )
        self._hash = None

    def _build_derived(self):
        n_h = len(self.hypotheses)
        n_s = self.space.n_states
        uniform = np.full((n_s, N_ACTIONS), 1.0 / N_ACTIONS)
        robot_probs = np.empty((n_h, n_s, N_ACTIONS))
        cheese_probs = np.empty((n_h, n_s, N_ACTIONS))
        robot_values = np.full((n_h, n_s), np.nan)
        beta = self.config.beta
        softmax_memo = {}

        def soft(q_key, q):
            if q_key not in softmax_memo:
                softmax_memo[q_key] = softmax_policy(q, beta)
            return softmax_memo[q_key]

        for i, h in enumerate(self.hypotheses):
            if h.r_cheese:
                q_c, _ = self.cheese_plans[h.g_cheese]
                cheese_probs[i] = soft(("c", h.g_cheese), q_c)
            else:
                cheese_probs[i] = uniform
            key = robot_plan_key(h)
            if key is not None:
                q_r, v_r = self.robot_plans[key]
                robot_probs[i] = soft(("r", key), q_r)
                robot_values[i] = v_r
            else:
                robot_probs[i] = uniform
        for arr in (robot_probs, cheese_probs, robot_values):
            arr.setflags(write=False)
        self.robot_probs = robot_probs
        self.cheese_probs = cheese_probs
        self.robot_values = robot_values

    def hypothesis_index(self, hypothesis: Hypothesis) -> int:
        try:
            return self._hyp_index[hypothesis]
        except KeyError:
            raise KeyError(f"hypothesis not in cache: {hypothesis}") from None

    def entry(self, hypothesis: Hypothesis) -> PolicyEntry:
        self.hypothesis_index(hypothesis)
        cheese_q = cheese_v = robot_q = robot_v = None
        if hypothesis.r_cheese:
            cheese_q, cheese_v = self.cheese_plans[hypothesis.g_cheese]
        key = robot_plan_key(hypothesis)
        if key is not None:
            robot_q, robot_v = self.robot_plans[key]
        return PolicyEntry(cheese_q, cheese_v, robot_q, robot_v)

    @property
    def n_hypotheses(self) -> int:
        return len(self.hypotheses)

    def cache_hash(self) -> str:
        if self._hash is None:
            digest = hashlib.sha256()
            digest.update(self.space.layout.dynamics_hash().encode())
            digest.update(_config_json(self.params, self.config).encode())
            for name, arr in self._named_arrays():
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(arr).tobytes())
            self._hash = digest.hexdigest()[:16]
        return self._hash

    def _named_arrays(self):
        yield "next_tensor", self.space.transition_tensor()
        for goal in sorted(self.cheese_plans):
            q, v = self.cheese_plans[goal]
            yield f"cheese_q:{goal}", q
            yield f"cheese_v:{goal}", v
        for key in sorted(self.robot_plans, key=_encode_key):
            q, v = self.robot_plans[key]
            yield f"robot_q:{_encode_key(key)}", q
            yield f"robot_v:{_encode_key(key)}", v


def _config_json(params: RewardParams, config: PlannerConfig) -> str:
    return json.dumps(
        {
            "goal_reward": params.goal_reward,
            "move_cost": params.move_cost,
            "gamma": config.gamma,
            "beta": config.beta,
            "residual_tol": config.residual_tol,
            "max_iterations": config.max_iterations,
        },
        sort_keys=True,
    )


def default_workers() -> int:
    env = os.environ.get("STORYOPT_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


_TASK_STATE: dict = {}


def _plan_robot_task(key):
    st = _TASK_STATE
    hypothesis = Hypothesis(
        g_cheese=key[0][1] if key[0][0] == "softmax" else "pink",
        g_robot=key[1],
        rho=key[2],
        r_robot=True,
        r_cheese=key[0][0] == "softmax",
    )
    try:
        q, v = plan_robot(
            st["space"],
            hypothesis,
            st["policies"][key[0]],
            st["params"],
            st["config"],
            transition_op=st["ops"][key[0]],
        )
    except ConvergenceError as exc:
        raise ConvergenceError(f"robot plan {_encode_key(key)}: {exc}") from exc
    return key, q, v


def build_policy_cache(
    layout,
    hypothesis_space: Optional[Sequence[Hypothesis]] = None,
    params: RewardParams = RewardParams(),
    config: PlannerConfig = PlannerConfig(),
    workers: Optional[int] = None,
) -> PolicyCache:
    """Plan every hypothesis and assemble the shared cache.

    Robot plans are independent and run on a process pool (fork); results
    are assembled in key order so the cache is deterministic regardless of
    scheduling.
    """
    space = _as_space(layout)
    if hypothesis_space is None:
        hypothesis_space = build_hypothesis_space()
    hypothesis_space = list(hypothesis_space)
    if workers is None:
        workers = default_workers()

    cheese_goals = sorted({h.g_cheese for h in hypothesis_space if h.r_cheese})
    cheese_plans = {}
    for goal in cheese_goals:
        try:
            cheese_plans[goal] = plan_cheese(space, goal, params, config)
        except ConvergenceError as exc:
            raise ConvergenceError(f"cheese plan {goal}: {exc}") from exc

    models = sorted(
        {cheese_model_of(h) for h in hypothesis_space if h.r_robot}
    )
    policies = {}
    ops = {}
    uniform = np.full((space.n_states, N_ACTIONS), 1.0 / N_ACTIONS)
    for model in models:
        if model[0] == "softmax":
            policies[model] = softmax_policy(cheese_plans[model[1]][0], config.beta)
        else:
            policies[model] = uniform
        ops[model] = robot_operator(space, policies[model])

    keys = sorted(
        {robot_plan_key(h) for h in hypothesis_space if h.r_robot}, key=_encode_key
    )
    _TASK_STATE.clear()
    _TASK_STATE.update(
        space=space, policies=policies, ops=ops, params=params, config=config
    )
    robot_plans = {}
    try:
        if workers > 1 and len(keys) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(min(workers, len(keys))) as pool:
                for key, q, v in pool.map(_plan_robot_task, keys):
                    robot_plans[key] = (q, v)
        else:
            for key in keys:
                _, q, v = _plan_robot_task(key)
                robot_plans[key] = (q, v)
    finally:
        _TASK_STATE.clear()

    return PolicyCache(
        space=space,
        hypotheses=hypothesis_space,
        params=params,
        config=config,
        cheese_plans=cheese_plans,
        robot_plans=robot_plans,
    )


def action_likelihood(
    cache: PolicyCache,
    hypothesis: Hypothesis,
    agent: str,
    state: WorldState,
    action: Action,
) -> float:
    """P(action | hypothesis, state) for one agent.

    Softmax of beta times the cached Q-values for rational agents; exactly
    0.2 per action for irrational ones.
    """
    i = cache.hypothesis_index(hypothesis)
    s = cache.space.index_of(state)
    if agent == "robot":
        return float(cache.robot_probs[i, s, action])
    if agent == "cheese":
        return float(cache.cheese_probs[i, s, action])
    raise ValueError(f"unknown agent {agent!r}")


# --- persistence -----------------------------------------------------------


def save_cache(cache: PolicyCache, path) -> None:
    """Write the cache to a deterministic self-describing binary file."""
    arrays = list(cache._named_arrays())
    manifest = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        manifest.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "nbytes": arr.nbytes,
            }
        )
    header = {
        "format": 1,
        "dynamics_hash": cache.space.layout.dynamics_hash(),
        "layout_text": layout_to_text(cache.space.layout),
        "settings": json.loads(_config_json(cache.params, cache.config)),
        "hypotheses": [
            [h.g_cheese, h.g_robot, h.rho, h.r_robot, h.r_cheese]
            for h in cache.hypotheses
        ],
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_cache(path, layout: Optional[WorldLayout] = None) -> PolicyCache:
    """Load a cache file, optionally validating it against a layout."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise ValueError(f"not a policy cache file: {path}")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size))
        arrays = {}
        for meta in header["arrays"]:
            raw = fh.read(meta["nbytes"])
            arrays[meta["name"]] = np.frombuffer(
                raw, dtype=np.dtype(meta["dtype"])
            ).reshape(meta["shape"])
    cache_layout = parse_layout(header["layout_text"])
    if layout is not None and layout.dynamics_hash() != cache_layout.dynamics_hash():
        raise ValueError(
            "cache was built for a different layout "
            f"({header['dynamics_hash']} != {layout.dynamics_hash()})"
        )
    space = enumerate_states(layout if layout is not None else cache_layout)
    space._next_tensor = arrays["next_tensor"]
    s = header["settings"]
    params = RewardParams(goal_reward=s["goal_reward"], move_cost=s["move_cost"])
    config = PlannerConfig(
        gamma=s["gamma"],
        beta=s["beta"],
        residual_tol=s["residual_tol"],
        max_iterations=s["max_iterations"],
    )
    hypotheses = [
        Hypothesis(gc, gr, rho, rr, rc)
        for gc, gr, rho, rr, rc in header["hypotheses"]
    ]
    cheese_plans = {}
    robot_plans = {}
    for h in hypotheses:
        if h.r_cheese and h.g_cheese not in cheese_plans:
            g = h.g_cheese
            cheese_plans[g] = (arrays[f"cheese_q:{g}"], arrays[f"cheese_v:{g}"])
        key = robot_plan_key(h)
        if key is not None and key not in robot_plans:
            enc = _encode_key(key)
            robot_plans[key] = (arrays[f"robot_q:{enc}"], arrays[f"robot_v:{enc}"])
    return PolicyCache(
        space=space,
        hypotheses=hypotheses,
        params=params,
        config=config,
        cheese_plans=cheese_plans,
        robot_plans=robot_plans,
    )
