"""Script search: beam search over transition sequences, plus naive rollouts.

Each sampled initial state seeds an independent beam search whose heuristic
is the objective evaluated on the script prefix; the best script across
all seeds wins.  Summed objective terms are scored incrementally (prefix
additivity); flashback continuations are re-evaluated per candidate.

Searches for different initial states are independent and run on a fork
pool; the merge is a pure reduction ordered by start index, so results do
not depend on worker count or scheduling.
"""

from __future__ import annotations

import multiprocessing
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .inference import DEFAULT_EPSILON, Hypothesis, forget
from .objectives import (
    EvalContext,
    FinalPart,
    ObjectiveAST,
    ObjectiveWeights,
    StepBatch,
    SumPart,
    _eval,
    evaluate_script,
)
from .planner import PolicyCache, default_workers
from .world import (
    Action,
    CHEESE_MOVE_SUCCESS,
    Cell,
    DeusTransition,
    JointTransition,
    N_ACTIONS,
    Script,
    WorldLayout,
    WorldState,
    apply_deus,
    step,
)

RHO_CLASSES = {"help": (1, 3), "hinder": (-1, -3), "indifferent": (0,)}


@dataclass(frozen=True)
class SearchConfig:
    horizon: int = 15
    beam_width: int = 1
    n_initial_states: int = 500
    rng_seed: int = 0
    deus_enabled: bool = False

    def __post_init__(self):
        if self.horizon <= 0 or self.beam_width < 1 or self.n_initial_states < 1:
            raise ValueError("horizon, beam_width and n_initial_states must be >= 1")


@dataclass
class SearchResult:
    script: Script
    breakdown: object
    per_start_scores: np.ndarray
    best_start_index: int
    wall_time: float
    prefix_evals: int
    diagnostics: dict
    manifest: dict


def sample_initial_states(
    layout: WorldLayout,
    n: int,
    rng_seed: int,
    table_mode: str = "sample",
) -> list[WorldState]:
    """Draw n states uniformly over valid placements.

    Robot and cheese land on distinct free cells; the table is uniform
    over the remaining free cells plus absent.  Fixed starts in the layout
    override sampling for that entity (and consume no randomness);
    table_mode="absent" forces a missing table.
    """
    free = layout.free_cells()
    if len(free) < 3:
        raise ValueError(f"layout too small: {len(free)} free cells, need >= 3")
    rng = np.random.default_rng(rng_seed)
    fixed_table = None if table_mode == "absent" else layout.start_table
    states = []
    for _ in range(n):
        if layout.start_robot is not None:
            robot = layout.start_robot
        else:
            taken = {layout.start_cheese, fixed_table}
            options = [c for c in free if c not in taken]
            robot = options[int(rng.integers(len(options)))]
        if layout.start_cheese is not None:
            cheese = layout.start_cheese
        else:
            taken = {robot, fixed_table}
            options = [c for c in free if c not in taken]
            cheese = options[int(rng.integers(len(options)))]
        if table_mode == "absent":
            table = None
        elif fixed_table is not None:
            table = fixed_table
        else:
            options = [c for c in free if c != robot and c != cheese]
            i = int(rng.integers(len(options) + 1))
            table = None if i == len(options) else options[i]
        state = WorldState(robot=robot, cheese=cheese, table=table)
        state.validate(layout)
        states.append(state)
    return states


def sample_scenario(
    layout: WorldLayout, rho_class: str, seed: int
) -> tuple[Hypothesis, WorldState]:
    """Random rational scenario for a naive baseline run.

    Goals are uniform and rho is uniform over the class's sign set; the
    initial state uses the same sampler as the optimizer.
    """
    if rho_class not in RHO_CLASSES:
        raise ValueError(f"unknown rho class {rho_class!r}")
    rng = np.random.default_rng([seed, 0x5EED])
    g_cheese = ("pink", "green")[int(rng.integers(2))]
    g_robot = ("pink", "green", None)[int(rng.integers(3))]
    rho_set = RHO_CLASSES[rho_class]
    rho = rho_set[int(rng.integers(len(rho_set)))]
    hypothesis = Hypothesis(g_cheese, g_robot, rho, True, True)
    initial = sample_initial_states(layout, 1, seed)[0]
    return hypothesis, initial


def naive_rollout(
    layout: WorldLayout,
    hypothesis: Hypothesis,
    initial: WorldState,
    horizon: int,
    rng_seed: int,
    cache: PolicyCache,
) -> Script:
    """Roll both characters forward by sampling their softmax policies.

    Cheese moves succeed with probability 0.6; the run is deterministic
    given the seed.
    """
    if not hypothesis.rational_pair:
        raise ValueError("naive rollouts require a fully rational hypothesis")
    h = cache.hypothesis_index(hypothesis)
    space = cache.space
    rng = np.random.default_rng(rng_seed)
    state = initial
    transitions = []
    for _ in range(horizon):
        s = space.index_of(state)
        p_r = cache.robot_probs[h, s]
        p_c = cache.cheese_probs[h, s]
        ra = Action(int(rng.choice(N_ACTIONS, p=p_r / p_r.sum())))
        ca = Action(int(rng.choice(N_ACTIONS, p=p_c / p_c.sum())))
        if ca != Action.STAY:
            flag = bool(rng.random() < CHEESE_MOVE_SUCCESS)
        else:
            flag = True
        nxt = step(layout, state, ra, ca, flag)
        transitions.append(JointTransition(ra, ca, flag, nxt))
        state = nxt
    return Script(layout=layout, initial=initial, transitions=tuple(transitions))


# --- beam search -----------------------------------------------------------


@dataclass
class _Node:
    state_idx: int
    belief: np.ndarray
    artist_cum: float
    rat_cum: float
    attempts: int
    successes: int
    deus_used: bool
    enc: tuple
    transitions: tuple
    score: float = -np.inf


def _initial_enc(state: WorldState) -> tuple:
    t = (-1, -1) if state.table is None else (state.table.col, state.table.row)
    return (
        state.robot.col,
        state.robot.row,
        state.cheese.col,
        state.cheese.row,
        t[0],
        t[1],
    )


_SEARCH_STATE: dict = {}


def _candidate_arrays(space, s: int, deus_allowed: bool):
    """Next-state/encoding arrays for all legal expansions of state s.

    Mirrors legal_transitions: all 25 action pairs with success=True, plus
    a success=False variant where the flag changes the outcome.
    """
    nxt = space.transition_tensor()[s]  # (5, 5, 2)
    grid_material = nxt[:, :, 0] != nxt[:, :, 1]
    ra_grid, ca_grid = np.meshgrid(
        np.arange(N_ACTIONS), np.arange(N_ACTIONS), indexing="ij"
    )
    ra_all = ra_grid.ravel()
    ca_all = ca_grid.ravel()
    m = grid_material[ra_all, ca_all]
    ra = np.concatenate([ra_all, ra_all[m]])
    ca = np.concatenate([ca_all, ca_all[m]])
    flags = np.concatenate(
        [np.ones(len(ra_all), dtype=bool), np.zeros(int(m.sum()), dtype=bool)]
    )
    next_idx = np.concatenate([nxt[ra_all, ca_all, 0], nxt[ra_all[m], ca_all[m], 1]])
    material = grid_material[ra, ca]
    deus_cells = None
    if deus_allowed:
        f = space.n_free
        ri = int(space.robot_cell_index[s])
        ci = int(space.cheese_cell_index[s])
        cells = np.array([i for i in range(f) if i != ri and i != ci], dtype=np.int64)
        padded = (ri * f + ci) * (f + 1) + cells
        deus_next = space._padded_to_dense[padded].astype(np.int64)
        deus_cells = (cells, deus_next)
    return ra, ca, flags, next_idx.astype(np.int64), material, deus_cells


def _score_candidates(node: _Node, t: int, st: dict):
    """Vectorized scoring of all expansions of one beam node."""
    cache: PolicyCache = st["cache"]
    space = cache.space
    config: SearchConfig = st["config"]
    weights: ObjectiveWeights = st["weights"]
    epsilon: float = st["epsilon"]
    ast: ObjectiveAST = st["ast"]
    ctx: EvalContext = st["ctx"]
    horizon = config.horizon + 1 if ast.flashback else config.horizon

    s = node.state_idx
    deus_allowed = (
        config.deus_enabled
        and not node.deus_used
        and space.table_cell_index[s] == space.n_free
    )
    ra, ca, flags, next_idx, material, deus = _candidate_arrays(space, s, deus_allowed)
    n_joint = len(ra)

    lik = cache.robot_probs[:, s, :][:, ra] * cache.cheese_probs[:, s, :][:, ca]
    post = node.belief[:, None] * lik
    z = post.sum(axis=0)
    keep = z > 0.0
    b_new = (post / np.where(keep, z, 1.0)[None, :]).T  # (C, N)
    if epsilon:
        n_h = b_new.shape[1]
        b_new = b_new * (1.0 - epsilon) + (1.0 - b_new) * (epsilon / (n_h - 1))
        b_new /= b_new.sum(axis=1, keepdims=True)

    meta = [(0, int(r), int(c), 0 if f else 1) for r, c, f in zip(ra, ca, flags)]
    att = node.attempts + material.astype(int)
    succ = node.successes + (material & flags).astype(int)
    deus_flags = np.zeros(n_joint, dtype=bool)

    if deus is not None and len(deus[0]):
        cells, deus_next = deus
        b_deus = forget(node.belief, epsilon)
        b_new = np.vstack([b_new, np.tile(b_deus, (len(cells), 1))])
        next_idx = np.concatenate([next_idx, deus_next])
        keep = np.concatenate([keep, np.ones(len(cells), dtype=bool)])
        att = np.concatenate([att, np.full(len(cells), node.attempts)])
        succ = np.concatenate([succ, np.full(len(cells), node.successes)])
        deus_flags = np.concatenate([deus_flags, np.ones(len(cells), dtype=bool)])
        for cell_i in cells:
            cell = space.free[int(cell_i)]
            meta.append((1, cell.col, cell.row, 0))

    k = len(next_idx)
    b_prev = np.tile(node.belief, (k, 1))
    batch = StepBatch(
        t=np.full(k, t),
        horizon=horizon,
        b_prev=b_prev,
        b_new=b_new,
        state_idx=next_idx,
    )
    step_sum = np.zeros(k)
    final_sum = np.zeros(k)
    for part in ast.parts:
        if isinstance(part, SumPart):
            step_sum += _eval(part.expr, ctx, batch)
        else:
            final_sum += part.weight * _eval(part.expr, ctx, batch)
    artist_cum = node.artist_cum + step_sum

    flash = np.zeros(k)
    if ast.flashback:
        cont_lik = (
            cache.robot_probs[:, next_idx, Action.EAST]
            * cache.cheese_probs[:, next_idx, Action.STAY]
        ).T
        post_c = b_new * cont_lik
        zc = post_c.sum(axis=1, keepdims=True)
        b_cont = post_c / np.where(zc > 0, zc, 1.0)
        if epsilon:
            n_h = b_cont.shape[1]
            b_cont = b_cont * (1.0 - epsilon) + (1.0 - b_cont) * (epsilon / (n_h - 1))
            b_cont /= b_cont.sum(axis=1, keepdims=True)
        cont_next = space.transition_tensor()[next_idx, Action.EAST, Action.STAY, 0]
        cont_batch = StepBatch(
            t=np.full(k, t + 1),
            horizon=horizon,
            b_prev=b_new,
            b_new=b_cont,
            state_idx=cont_next,
        )
        for part in ast.parts:
            if isinstance(part, SumPart):
                flash += _eval(part.expr, ctx, cont_batch)
        pushed = (
            space.cheese_cell_index[cont_next] != space.cheese_cell_index[next_idx]
        )
        flash += pushed.astype(float)

    rat_cum = node.rat_cum + b_new @ cache.rational_mask.astype(float)
    env = np.where(att > 0, -((succ / np.maximum(att, 1) - 0.6) ** 2), 0.0)
    score = (
        artist_cum
        + flash
        + final_sum
        + weights.rational_weight * rat_cum
        + weights.env_weight * env
    )
    score = np.where(keep, score, -np.inf)
    return score, b_new, next_idx, artist_cum, rat_cum, att, succ, deus_flags, meta


def _search_start(start_index: int):
    st = _SEARCH_STATE
    cache: PolicyCache = st["cache"]
    config: SearchConfig = st["config"]
    state: WorldState = st["initial_states"][start_index]
    space = cache.space

    root = _Node(
        state_idx=space.index_of(state),
        belief=np.asarray(st["prior"], dtype=np.float64),
        artist_cum=0.0,
        rat_cum=0.0,
        attempts=0,
        successes=0,
        deus_used=False,
        enc=(),
        transitions=(),
        score=-np.inf,
    )
    beam = [root]
    evals = 0
    dropped = 0
    for t in range(1, config.horizon + 1):
        pool = []
        for node in beam:
            try:
                scored = _score_candidates(node, t, st)
            except Exception:
                dropped += 1
                continue
            (score, b_new, next_idx, artist, rat, att, succ, deus_flags, meta) = scored
            evals += len(score)
            for j in range(len(score)):
                if not np.isfinite(score[j]):
                    dropped += 1
                    continue
                pool.append(
                    (
                        -score[j],
                        node.enc + (meta[j],),
                        node,
                        j,
                        (score, b_new, next_idx, artist, rat, att, succ, deus_flags, meta),
                    )
                )
        if not pool:
            break
        pool.sort(key=lambda item: (item[0], item[1]))
        beam = []
        for neg_score, enc, parent, j, arrs in pool[: config.beam_width]:
            score, b_new, next_idx, artist, rat, att, succ, deus_flags, meta = arrs
            kind, a, b, c = meta[j]
            if kind == 0:
                tr = (0, Action(a), Action(b), c == 0)
            else:
                tr = (1, Cell(a, b))
            beam.append(
                _Node(
                    state_idx=int(next_idx[j]),
                    belief=b_new[j],
                    artist_cum=float(artist[j]),
                    rat_cum=float(rat[j]),
                    attempts=int(att[j]),
                    successes=int(succ[j]),
                    deus_used=parent.deus_used or bool(deus_flags[j]),
                    enc=enc,
                    transitions=parent.transitions + (tr,),
                    score=float(score[j]),
                )
            )
    best = beam[0]
    return {
        "start_index": start_index,
        "score": best.score,
        "enc": best.enc,
        "transitions": best.transitions,
        "prefix_evals": evals,
        "dropped": dropped,
    }


def _materialize(layout: WorldLayout, initial: WorldState, raw_transitions) -> Script:
    state = initial
    out = []
    for tr in raw_transitions:
        if tr[0] == 0:
            _, ra, ca, flag = tr
            nxt = step(layout, state, ra, ca, flag)
            out.append(JointTransition(ra, ca, flag, nxt))
        else:
            nxt = apply_deus(layout, state, tr[1])
            out.append(DeusTransition(tr[1], nxt))
        state = nxt
    return Script(layout=layout, initial=initial, transitions=tuple(out))


def optimize(
    layout: WorldLayout,
    objective: ObjectiveAST,
    cache: PolicyCache,
    config: SearchConfig = SearchConfig(),
    weights: ObjectiveWeights = ObjectiveWeights(),
    epsilon: float = DEFAULT_EPSILON,
    workers: Optional[int] = None,
    progress=None,
) -> SearchResult:
    """Beam-search the objective from sampled initial states.

    Deus-enabled runs require table-absent worlds, so initial states are
    sampled without a table (a layout pinning a table start is an error).
    Ties are broken by the lexicographically smallest transition encoding.
    """
    if layout.dynamics_hash() != cache.space.layout.dynamics_hash():
        raise ValueError("cache was built for a different layout")
    start_time = time.perf_counter()
    if config.deus_enabled and layout.start_table is not None:
        raise ValueError(
            "deus-enabled runs need table-absent worlds, but the layout "
            "fixes a table start"
        )
    table_mode = "absent" if config.deus_enabled else "sample"
    initial_states = sample_initial_states(
        layout, config.n_initial_states, config.rng_seed, table_mode
    )
    if workers is None:
        workers = default_workers()

    n_h = cache.n_hypotheses
    _SEARCH_STATE.clear()
    _SEARCH_STATE.update(
        cache=cache,
        config=config,
        weights=weights,
        epsilon=epsilon,
        ast=objective,
        ctx=EvalContext(cache=cache, flags=None),
        initial_states=initial_states,
        prior=np.full(n_h, 1.0 / n_h),
    )
    try:
        if workers > 1 and config.n_initial_states > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers) as pool:
                results = pool.map(
                    _search_start,
                    range(config.n_initial_states),
                    chunksize=max(1, config.n_initial_states // (workers * 8)),
                )
        else:
            results = [_search_start(i) for i in range(config.n_initial_states)]
    finally:
        _SEARCH_STATE.clear()

    per_start = np.array([r["score"] for r in results])
    evals = int(sum(r["prefix_evals"] for r in results))
    dropped = int(sum(r["dropped"] for r in results))
    if progress is not None:
        for r in results:
            progress(r["start_index"], r["score"], r["prefix_evals"])

    def rank(r):
        return (-r["score"], _initial_enc(initial_states[r["start_index"]]), r["enc"])

    best = min(results, key=rank)
    script = _materialize(
        layout, initial_states[best["start_index"]], best["transitions"]
    )
    breakdown, _ = evaluate_script(
        objective, script, cache, weights, horizon=config.horizon, epsilon=epsilon
    )
    wall = time.perf_counter() - start_time
    manifest = {
        "search": {
            "horizon": config.horizon,
            "beam_width": config.beam_width,
            "n_initial_states": config.n_initial_states,
            "rng_seed": config.rng_seed,
            "deus_enabled": config.deus_enabled,
        },
        "dynamics_hash": layout.dynamics_hash(),
        "cache_hash": cache.cache_hash(),
    }
    return SearchResult(
        script=script,
        breakdown=breakdown,
        per_start_scores=per_start,
        best_start_index=int(best["start_index"]),
        wall_time=wall,
        prefix_evals=evals,
        diagnostics={
            "dropped_prefixes": dropped,
            "incremental_best_score": float(best["score"]),
        },
        manifest=manifest,
    )
