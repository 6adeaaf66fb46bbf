"""Inverse planner: Bayesian posterior over latent character hypotheses.

A hypothesis bundles the cheese's goal tile, the robot's goal tile (or
none), the robot's social alignment rho, and one rationality flag per
character.  The audience starts from a uniform prior and updates it after
every observed transition; a small forgetting mixture keeps old evidence
from becoming permanent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .world import (
    DeusTransition,
    JointTransition,
    Script,
    Transition,
    WorldLayout,
    WorldState,
)

DEFAULT_EPSILON = 1e-5

RHO_VALUES = (-3, -1, 0, 1, 3)
TILES = ("pink", "green")
ROBOT_GOALS = ("pink", "green", None)

# Canonical stand-in for latent values that cannot influence behaviour
# (an irrational agent's own goal, an irrational robot's alignment).
CANONICAL_G_CHEESE = "pink"


class InferenceError(ValueError):
    """Raised on impossible observations or zero-mass conditionals."""


@dataclass(frozen=True)
class Hypothesis:
    g_cheese: str
    g_robot: Optional[str]
    rho: int
    r_robot: bool = True
    r_cheese: bool = True

    def __post_init__(self):
        if self.g_cheese not in TILES:
            raise ValueError(f"bad cheese goal {self.g_cheese!r}")
        if self.g_robot not in ROBOT_GOALS:
            raise ValueError(f"bad robot goal {self.g_robot!r}")
        if self.rho not in RHO_VALUES:
            raise ValueError(f"bad rho {self.rho!r}")
        if not self.r_cheese and self.rho != 0:
            raise ValueError("irrational cheese requires an indifferent robot")

    @property
    def rational_pair(self) -> bool:
        return self.r_robot and self.r_cheese


def build_hypothesis_space(collapse: bool = True) -> list[Hypothesis]:
    """The canonical hypothesis list in stable order.

    With collapse=True (default) latent values with no behavioural effect
    are folded to one canonical representative, yielding 36 hypotheses:
    30 fully rational + 3 cheese-irrational + 2 robot-irrational + 1 both.
    With collapse=False the constrained full product is kept (72), which
    shifts the prior mass on rationality.
    """
    space: list[Hypothesis] = []
    for gc in TILES:
        for gr in ROBOT_GOALS:
            for rho in RHO_VALUES:
                space.append(Hypothesis(gc, gr, rho, True, True))
    if collapse:
        for gr in ROBOT_GOALS:
            space.append(Hypothesis(CANONICAL_G_CHEESE, gr, 0, True, False))
        for gc in TILES:
            space.append(Hypothesis(gc, None, 0, False, True))
        space.append(Hypothesis(CANONICAL_G_CHEESE, None, 0, False, False))
    else:
        for gc in TILES:
            for gr in ROBOT_GOALS:
                space.append(Hypothesis(gc, gr, 0, True, False))
        for gc in TILES:
            for gr in ROBOT_GOALS:
                for rho in RHO_VALUES:
                    space.append(Hypothesis(gc, gr, rho, False, True))
        for gc in TILES:
            for gr in ROBOT_GOALS:
                space.append(Hypothesis(gc, gr, 0, False, False))
    return space


@dataclass(frozen=True)
class Belief:
    """Normalized probability vector over a hypothesis space."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if np.any(p < 0):
            raise ValueError("negative belief entry")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError(f"belief sums to {p.sum()!r}, expected 1")

    def __len__(self) -> int:
        return len(self.probs)


def uniform_prior(space: Sequence[Hypothesis]) -> Belief:
    if not space:
        raise ValueError("empty hypothesis space")
    n = len(space)
    return Belief(np.full(n, 1.0 / n))


def forget(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-turn chance that all latents resample uniformly at random."""
    if epsilon == 0.0:
        return probs.copy()
    n = len(probs)
    out = probs * (1.0 - epsilon) + (1.0 - probs) * (epsilon / (n - 1))
    return out / out.sum()


def observe(
    belief: Belief,
    layout: WorldLayout,
    prev_state: WorldState,
    transition: Transition,
    cache,
    epsilon: float = DEFAULT_EPSILON,
) -> Belief:
    """One Bayes update followed by the forgetting adjustment.

    Joint transitions weight each hypothesis by the product of both
    characters' action likelihoods; the cheese-success outcome is
    hypothesis-independent and cancels in normalization.  Deus transitions
    carry no likelihood and apply forgetting only.
    """
    probs = belief.probs
    if isinstance(transition, JointTransition):
        s = cache.space.index_of(prev_state)
        lik = (
            cache.robot_probs[:, s, transition.robot_action]
            * cache.cheese_probs[:, s, transition.cheese_action]
        )
        post = probs * lik
        z = float(post.sum())
        if z <= 0.0:
            raise InferenceError("observation impossible under every hypothesis")
        post = post / z
    else:
        post = probs.copy()
    return Belief(forget(post, epsilon))


def query(
    belief: Belief,
    space: Sequence[Hypothesis],
    predicate: Callable[[Hypothesis], bool],
    condition: Optional[Callable[[Hypothesis], bool]] = None,
) -> float:
    """P(predicate | condition) under the belief; unconditioned when absent."""
    p = belief.probs
    if condition is None:
        cond_mask = np.ones(len(space), dtype=bool)
    else:
        cond_mask = np.fromiter((condition(h) for h in space), bool, len(space))
    denom = float(p[cond_mask].sum())
    if denom <= 0.0:
        raise InferenceError("conditioned on zero-probability event")
    pred_mask = np.fromiter((predicate(h) for h in space), bool, len(space))
    return float(p[pred_mask & cond_mask].sum()) / denom


def expected_robot_value(
    belief: Belief,
    state: WorldState,
    cache,
    condition: Optional[Callable[[Hypothesis], bool]] = None,
) -> float:
    """E[V_robot(state)] under the belief restricted to planned hypotheses.

    The condition defaults to both characters being rational; it must not
    admit hypotheses without a planned robot.
    """
    space = cache.hypotheses
    if condition is None:
        cond = np.fromiter((h.rational_pair for h in space), bool, len(space))
    else:
        cond = np.fromiter((condition(h) for h in space), bool, len(space))
    has_v = ~np.isnan(cache.robot_values[:, 0])
    if np.any(cond & ~has_v):
        raise InferenceError("condition admits hypotheses with no robot plan")
    p = belief.probs[cond]
    denom = float(p.sum())
    if denom <= 0.0:
        raise InferenceError("conditioned on zero-probability event")
    s = cache.space.index_of(state)
    values = cache.robot_values[cond, s]
    return float(np.dot(p, values)) / denom


def kl_divergence(prev: Belief, next_belief: Belief) -> float:
    """KL(prev || next) in nats, with 0*log(0/x) = 0."""
    p = prev.probs
    q = next_belief.probs
    support = p > 0
    if np.any(q[support] <= 0):
        raise InferenceError("KL undefined: next belief lacks support of prev")
    ps, qs = p[support], q[support]
    return float(np.sum(ps * np.log(ps / qs)))


def _kl_allow_inf(prev: Belief, next_belief: Belief) -> float:
    """KL for trace records: support loss yields +inf instead of an error.

    Posterior entries can underflow to exact zero on long runs without
    forgetting; the divergence is then genuinely infinite.
    """
    try:
        return kl_divergence(prev, next_belief)
    except InferenceError:
        return float("inf")


@dataclass
class BeliefTrace:
    """Per-timestep audience state: length T+1 including the prior entry."""

    beliefs: list[Belief]
    ev_robot: np.ndarray
    kl_step: np.ndarray

    def __len__(self) -> int:
        return len(self.beliefs)

    @property
    def horizon(self) -> int:
        return len(self.beliefs) - 1


def trace(script: Script, cache, epsilon: float = DEFAULT_EPSILON) -> BeliefTrace:
    """Fold observe over a script starting from the uniform prior."""
    space = cache.hypotheses
    belief = uniform_prior(space)
    beliefs = [belief]
    states = script.states()
    ev = [expected_robot_value(belief, states[0], cache)]
    kl = [0.0]
    for t, tr in enumerate(script.transitions, start=1):
        try:
            new_belief = observe(
                belief, script.layout, states[t - 1], tr, cache, epsilon
            )
        except InferenceError as exc:
            raise InferenceError(f"at timestep {t}: {exc}") from exc
        kl.append(_kl_allow_inf(belief, new_belief))
        belief = new_belief
        beliefs.append(belief)
        ev.append(expected_robot_value(belief, states[t], cache))
    return BeliefTrace(
        beliefs=beliefs,
        ev_robot=np.array(ev, dtype=np.float64),
        kl_step=np.array(kl, dtype=np.float64),
    )


# --- CSV export ----------------------------------------------------------
#
# Columns mirror the audience plots: goal and alignment marginals both raw
# (over the full canonical space, collapsed values included) and
# conditioned on both characters being rational (suffix _rat).

CSV_COLUMNS = [
    "t",
    "p_cheese_pink",
    "p_cheese_green",
    "p_robot_pink",
    "p_robot_green",
    "p_robot_none",
    "p_rho_neg",
    "p_rho_zero",
    "p_rho_pos",
    "p_rational_pair",
    "p_cheese_pink_rat",
    "p_cheese_green_rat",
    "p_robot_pink_rat",
    "p_robot_green_rat",
    "p_robot_none_rat",
    "p_rho_neg_rat",
    "p_rho_zero_rat",
    "p_rho_pos_rat",
    "ev_robot",
    "kl_step",
]

_MARGINALS = [
    ("p_cheese_pink", lambda h: h.g_cheese == "pink"),
    ("p_cheese_green", lambda h: h.g_cheese == "green"),
    ("p_robot_pink", lambda h: h.g_robot == "pink"),
    ("p_robot_green", lambda h: h.g_robot == "green"),
    ("p_robot_none", lambda h: h.g_robot is None),
    ("p_rho_neg", lambda h: h.rho < 0),
    ("p_rho_zero", lambda h: h.rho == 0),
    ("p_rho_pos", lambda h: h.rho > 0),
]


def trace_rows(belief_trace: BeliefTrace, space: Sequence[Hypothesis]) -> list[dict]:
    rational = np.fromiter((h.rational_pair for h in space), bool, len(space))
    masks = {
        name: np.fromiter((pred(h) for h in space), bool, len(space))
        for name, pred in _MARGINALS
    }
    rows = []
    for t, belief in enumerate(belief_trace.beliefs):
        p = belief.probs
        rat_mass = float(p[rational].sum())
        row = {"t": t}
        for name in masks:
            row[name] = float(p[masks[name]].sum())
            row[name + "_rat"] = float(p[masks[name] & rational].sum()) / rat_mass
        row["p_rational_pair"] = rat_mass
        row["ev_robot"] = float(belief_trace.ev_robot[t])
        row["kl_step"] = float(belief_trace.kl_step[t])
        rows.append(row)
    return rows


def format_value(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{value:.12g}"


def trace_to_csv(belief_trace: BeliefTrace, space: Sequence[Hypothesis]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in trace_rows(belief_trace, space):
        writer.writerow([format_value(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
