"""Artist objectives: a small DSL parsed to ASTs and evaluated over traces.

Grammar (EBNF):

    objective  := { "sum t:" expr | weight expr } ;
    expr       := term { ("+"|"-") term } ;
    term       := factor { "*" factor } ;
    factor     := number | "P(" pred [ "|" pred ] ")" | "EV_robot"
                | "KL_step" | "sin(" number "*t/T*pi" ")"
                | "if" cond "{" expr "}" "else" "{" expr "}" | "(" expr ")" ;
    pred       := "rho" (">"|"<"|"=") number | "G_cheese" "=" tile
                | "G_robot" "=" (tile|"none") | pred "&" pred ;
    cond       := "t" ("<="|">") timeexpr ;
    timeexpr   := number | "T" [ "/" number ] ;
    tile       := "pink" | "green" ;

One extension beyond the core grammar: an objective may be wrapped in
``flashback { ... }``, which evaluates the enclosed objective on the
script with one fixed transition appended (robot east, cheese stays) and
adds one point when that transition pushes the cheese.

Summed parts run over t = 1..T; a bare ``weight expr`` part is evaluated
at the final timestep.  Every probability query and expected-value term
is implicitly conditioned on both characters being rational; a rationality
score and an environment-consistency score are added automatically with
configurable weights.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Union

import numpy as np

from .inference import (
    DEFAULT_EPSILON,
    BeliefTrace,
    Hypothesis,
    observe,
    trace as run_trace,
)
from .world import Action, JointTransition, Script, step

BUILTIN_NAMES = (
    "help",
    "hinder",
    "indifferent",
    "twist_help_to_hinder",
    "twist_hinder_to_help",
    "irony",
    "flashback_help",
    "flashback_hinder",
    "arc",
)


class ObjectiveSyntaxError(ValueError):
    pass


class ObjectiveTypeError(ValueError):
    pass


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class RhoPred:
    op: str  # "<", ">", "="
    value: float


@dataclass(frozen=True)
class GoalPred:
    agent: str  # "cheese" | "robot"
    tile: Optional[str]  # None encodes G_robot = none


@dataclass(frozen=True)
class AndPred:
    left: "Pred"
    right: "Pred"


Pred = Union[RhoPred, GoalPred, AndPred]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class QueryNode:
    pred: Pred
    cond: Optional[Pred] = None


@dataclass(frozen=True)
class EvRobot:
    pass


@dataclass(frozen=True)
class KlStep:
    pass


@dataclass(frozen=True)
class SinNode:
    coeff: float


@dataclass(frozen=True)
class TimeExpr:
    kind: str  # "const" | "T" | "T_div"
    value: int = 0

    def cutoff(self, horizon: int) -> int:
        if self.kind == "const":
            return self.value
        if self.kind == "T":
            return horizon
        return horizon // self.value


@dataclass(frozen=True)
class IfTime:
    op: str  # "<=" | ">"
    cutoff: TimeExpr
    then: "Expr"
    other: "Expr"


@dataclass(frozen=True)
class Bin:
    op: str  # "+", "-", "*"
    left: "Expr"
    right: "Expr"


Expr = Union[Num, QueryNode, EvRobot, KlStep, SinNode, IfTime, Bin]


@dataclass(frozen=True)
class SumPart:
    expr: Expr


@dataclass(frozen=True)
class FinalPart:
    weight: float
    expr: Expr


@dataclass(frozen=True)
class ObjectiveAST:
    parts: tuple[Union[SumPart, FinalPart], ...]
    flashback: bool = False


# --- parser ----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>\d+(?:\.\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<sym><=|>=|[-+*/:=<>(){}|&])"
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            col += 1
            i += 1
            continue
        m = _TOKEN_RE.match(text, i)
        if not m:
            raise ObjectiveSyntaxError(
                f"unexpected character {ch!r} at line {line}, column {col}"
            )
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(), line, col))
        col += m.end() - i
        i = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def error(self, message: str):
        if self.pos < len(self.tokens):
            tok = self.tokens[self.pos]
            where = f"line {tok.line}, column {tok.col} (near {tok.text!r})"
        else:
            where = "end of input"
        raise ObjectiveSyntaxError(f"{message} at {where}")

    def peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.text == text

    def take(self, text: str) -> bool:
        if self.at(text):
            self.pos += 1
            return True
        return False

    def expect(self, text: str):
        if not self.take(text):
            self.error(f"expected {text!r}")

    def number(self) -> float:
        tok = self.peek()
        if tok is None or tok.kind != "num":
            self.error("expected a number")
        self.pos += 1
        return float(tok.text)

    def parse(self) -> ObjectiveAST:
        flashback = False
        if self.take("flashback"):
            self.expect("{")
            inner = self._parts()
            self.expect("}")
            flashback = True
            parts = inner
        else:
            parts = self._parts()
        if self.peek() is not None:
            self.error("unexpected trailing input")
        if not parts:
            self.error("empty objective")
        ast = ObjectiveAST(parts=tuple(parts), flashback=flashback)
        _typecheck(ast)
        return ast

    def _parts(self):
        parts = []
        while True:
            tok = self.peek()
            if tok is None or tok.text == "}":
                return parts
            if self.take("sum"):
                self.expect("t")
                self.expect(":")
                parts.append(SumPart(self._expr()))
            elif tok.kind == "num":
                weight = self.number()
                parts.append(FinalPart(weight, self._expr()))
            else:
                self.error("expected 'sum t:' or a weighted expression")

    def _expr(self) -> Expr:
        node = self._term()
        while True:
            if self.take("+"):
                node = Bin("+", node, self._term())
            elif self.take("-"):
                node = Bin("-", node, self._term())
            else:
                return node

    def _term(self) -> Expr:
        node = self._factor()
        while self.take("*"):
            node = Bin("*", node, self._factor())
        return node

    def _factor(self) -> Expr:
        tok = self.peek()
        if tok is None:
            self.error("expected an expression")
        if tok.kind == "num":
            return Num(self.number())
        if self.take("("):
            node = self._expr()
            self.expect(")")
            return node
        if self.take("P"):
            self.expect("(")
            pred = self._pred()
            cond = None
            if self.take("|"):
                cond = self._pred()
            self.expect(")")
            return QueryNode(pred, cond)
        if self.take("EV_robot"):
            return EvRobot()
        if self.take("KL_step"):
            return KlStep()
        if self.take("sin"):
            self.expect("(")
            coeff = self.number()
            self.expect("*")
            self.expect("t")
            self.expect("/")
            self.expect("T")
            self.expect("*")
            self.expect("pi")
            self.expect(")")
            return SinNode(coeff)
        if self.take("if"):
            op, cutoff = self._cond()
            self.expect("{")
            then = self._expr()
            self.expect("}")
            self.expect("else")
            self.expect("{")
            other = self._expr()
            self.expect("}")
            return IfTime(op, cutoff, then, other)
        self.error(f"unexpected token {tok.text!r} in expression")

    def _pred(self) -> Pred:
        node = self._pred_atom()
        while self.take("&"):
            node = AndPred(node, self._pred_atom())
        return node

    def _pred_atom(self) -> Pred:
        if self.take("rho"):
            for op in ("<", ">", "="):
                if self.take(op):
                    return RhoPred(op, self.number())
            self.error("expected comparison after 'rho'")
        if self.take("G_cheese"):
            self.expect("=")
            return GoalPred("cheese", self._tile())
        if self.take("G_robot"):
            self.expect("=")
            if self.take("none"):
                return GoalPred("robot", None)
            return GoalPred("robot", self._tile())
        self.error("unknown predicate (expected rho, G_cheese or G_robot)")

    def _tile(self) -> str:
        for tile in ("pink", "green"):
            if self.take(tile):
                return tile
        self.error("expected 'pink' or 'green'")

    def _cond(self):
        self.expect("t")
        if self.take("<="):
            op = "<="
        elif self.take(">"):
            op = ">"
        else:
            self.error("expected '<=' or '>' after 't'")
        tok = self.peek()
        if tok is not None and tok.kind == "num":
            return op, TimeExpr("const", int(self.number()))
        self.expect("T")
        if self.take("/"):
            return op, TimeExpr("T_div", int(self.number()))
        return op, TimeExpr("T")


def _contains_kl(node) -> bool:
    if isinstance(node, KlStep):
        return True
    if isinstance(node, Bin):
        return _contains_kl(node.left) or _contains_kl(node.right)
    if isinstance(node, IfTime):
        return _contains_kl(node.then) or _contains_kl(node.other)
    return False


def _typecheck(ast: ObjectiveAST):
    for part in ast.parts:
        if isinstance(part, FinalPart) and _contains_kl(part.expr):
            raise ObjectiveTypeError("KL_step is only valid inside a summed term")


def parse_objective(text: str) -> ObjectiveAST:
    return _Parser(text).parse()


def builtin(name: str) -> ObjectiveAST:
    """Load one of the shipped objectives by name (parsed from its DSL file)."""
    if name not in BUILTIN_NAMES:
        raise ValueError(
            f"unknown objective {name!r}; available: {', '.join(BUILTIN_NAMES)}"
        )
    text = resources.files("storyopt").joinpath(f"dsl/{name}.dsl").read_text()
    return parse_objective(text)


def builtin_source(name: str) -> str:
    if name not in BUILTIN_NAMES:
        raise ValueError(f"unknown objective {name!r}")
    return resources.files("storyopt").joinpath(f"dsl/{name}.dsl").read_text()


# --- evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveWeights:
    rational_weight: float = 1.0
    env_weight: float = 1.0


@dataclass
class StepBatch:
    """Vectorized per-step inputs: K steps (or K candidate steps) at once."""

    t: np.ndarray
    horizon: int
    b_prev: np.ndarray
    b_new: np.ndarray
    state_idx: np.ndarray


@dataclass
class EvalContext:
    cache: object
    flags: list = field(default_factory=list)
    _masks: dict = field(default_factory=dict)

    @property
    def rational(self) -> np.ndarray:
        return self.cache.rational_mask

    def mask(self, pred: Optional[Pred]) -> np.ndarray:
        if pred not in self._masks:
            hyps = self.cache.hypotheses
            if pred is None:
                m = np.ones(len(hyps), dtype=bool)
            else:
                m = np.fromiter((_match(pred, h) for h in hyps), bool, len(hyps))
            self._masks[pred] = m
        return self._masks[pred]


def _match(pred: Pred, h: Hypothesis) -> bool:
    if isinstance(pred, RhoPred):
        if pred.op == "<":
            return h.rho < pred.value
        if pred.op == ">":
            return h.rho > pred.value
        return h.rho == pred.value
    if isinstance(pred, GoalPred):
        value = h.g_cheese if pred.agent == "cheese" else h.g_robot
        return value == pred.tile
    return _match(pred.left, h) and _match(pred.right, h)


def _eval(node: Expr, ctx: EvalContext, batch: StepBatch) -> np.ndarray:
    k = len(batch.t)
    if isinstance(node, Num):
        return np.full(k, node.value)
    if isinstance(node, QueryNode):
        cond = ctx.mask(node.cond) & ctx.rational
        num_mask = ctx.mask(node.pred) & cond
        denom = batch.b_new[:, cond].sum(axis=1)
        numer = batch.b_new[:, num_mask].sum(axis=1)
        zero = denom <= 0.0
        if np.any(zero):
            ctx.flags.append((node, batch.t[zero].tolist()))
        return np.where(zero, 0.0, numer / np.where(zero, 1.0, denom))
    if isinstance(node, EvRobot):
        rational = ctx.rational
        values = ctx.cache.robot_values[rational][:, batch.state_idx]
        mass = batch.b_new[:, rational]
        denom = mass.sum(axis=1)
        zero = denom <= 0.0
        if np.any(zero):
            ctx.flags.append((node, batch.t[zero].tolist()))
        numer = (mass * values.T).sum(axis=1)
        return np.where(zero, 0.0, numer / np.where(zero, 1.0, denom))
    if isinstance(node, KlStep):
        p = batch.b_prev
        q = batch.b_new
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p / q), 0.0)
        return terms.sum(axis=1)
    if isinstance(node, SinNode):
        return np.sin(node.coeff * np.pi * batch.t / batch.horizon)
    if isinstance(node, IfTime):
        cutoff = node.cutoff.cutoff(batch.horizon)
        mask = batch.t <= cutoff if node.op == "<=" else batch.t > cutoff
        return np.where(
            mask, _eval(node.then, ctx, batch), _eval(node.other, ctx, batch)
        )
    if isinstance(node, Bin):
        left = _eval(node.left, ctx, batch)
        right = _eval(node.right, ctx, batch)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        return left * right
    raise TypeError(f"unknown AST node {node!r}")


@dataclass
class PartScore:
    label: str
    total: float
    per_step: Optional[np.ndarray] = None


@dataclass
class ScoreBreakdown:
    """Total score with artist and auxiliary contributions listed separately."""

    total: float
    artist_total: float
    parts: list[PartScore]
    rational_score: float
    env_score: float
    weights: ObjectiveWeights
    zero_mass_flags: list = field(default_factory=list)


CONTINUATION = (Action.EAST, Action.STAY, True)


def continuation_transition(script: Script) -> JointTransition:
    """The fixed transition appended by flashback objectives."""
    state = script.final_state()
    ra, ca, flag = CONTINUATION
    return JointTransition(ra, ca, flag, step(script.layout, state, ra, ca, flag))


def env_score(script: Script) -> float:
    """Penalty for cheese-move success ratios away from the world's 0.6.

    Attempts count only cheese-initiated moves whose outcome the success
    flag can change (a feasible destination); robot pushes are excluded.
    Scripts with no attempts score 0.
    """
    attempts = successes = 0
    state = script.initial
    for tr in script.transitions:
        if isinstance(tr, JointTransition) and tr.cheese_action != Action.STAY:
            ok = step(script.layout, state, tr.robot_action, tr.cheese_action, True)
            fail = step(script.layout, state, tr.robot_action, tr.cheese_action, False)
            if ok != fail:
                attempts += 1
                if tr.cheese_success:
                    successes += 1
        state = tr.next
    if attempts == 0:
        return 0.0
    return -((successes / attempts - 0.6) ** 2)


def rational_score(belief_trace: BeliefTrace, cache) -> float:
    """Sum over t >= 1 of the unconditioned mass on both-rational hypotheses."""
    rational = cache.rational_mask
    return float(
        sum(b.probs[rational].sum() for b in belief_trace.beliefs[1:])
    )


def _trace_batch(script: Script, belief_trace: BeliefTrace, cache, horizon: int):
    n_steps = len(script)
    states = script.states()
    state_idx = np.array(
        [cache.space.index_of(s) for s in states[1:]], dtype=np.int64
    )
    b = np.array([bel.probs for bel in belief_trace.beliefs])
    return StepBatch(
        t=np.arange(1, n_steps + 1),
        horizon=horizon,
        b_prev=b[:-1],
        b_new=b[1:],
        state_idx=state_idx,
    )


def evaluate(
    ast: ObjectiveAST,
    script_prefix: Script,
    belief_trace: BeliefTrace,
    cache,
    weights: ObjectiveWeights = ObjectiveWeights(),
    horizon: Optional[int] = None,
    epsilon: float = DEFAULT_EPSILON,
) -> ScoreBreakdown:
    """Score a script prefix against its belief trace.

    `horizon` is the T appearing in time-dependent terms; it defaults to
    the prefix length (beam search passes the full planned horizon).
    Zero-mass conditionals contribute 0 and are flagged in the breakdown.
    """
    if len(belief_trace) != len(script_prefix) + 1:
        raise ValueError(
            f"trace length {len(belief_trace)} does not match "
            f"script of {len(script_prefix)} transitions"
        )
    if horizon is None:
        horizon = max(len(script_prefix), 1)
    ctx = EvalContext(cache=cache)

    bonus = 0.0
    if ast.flashback:
        cont = continuation_transition(script_prefix)
        final = script_prefix.final_state()
        cont_belief = observe(
            belief_trace.beliefs[-1], script_prefix.layout, final, cont, cache, epsilon
        )
        if cont.next.cheese != final.cheese:
            bonus = 1.0
        horizon = horizon + 1
        states = script_prefix.states() + [cont.next]
        b = np.array([bel.probs for bel in belief_trace.beliefs] + [cont_belief.probs])
        batch = StepBatch(
            t=np.arange(1, len(states)),
            horizon=horizon,
            b_prev=b[:-1],
            b_new=b[1:],
            state_idx=np.array(
                [cache.space.index_of(s) for s in states[1:]], dtype=np.int64
            ),
        )
    else:
        batch = _trace_batch(script_prefix, belief_trace, cache, horizon)

    parts = []
    artist_total = 0.0
    for i, part in enumerate(ast.parts):
        if isinstance(part, SumPart):
            if len(batch.t):
                values = _eval(part.expr, ctx, batch)
            else:
                values = np.zeros(0)
            total = float(values.sum())
            parts.append(PartScore(f"sum[{i}]", total, values))
        else:
            if len(batch.t):
                last = StepBatch(
                    t=batch.t[-1:],
                    horizon=batch.horizon,
                    b_prev=batch.b_prev[-1:],
                    b_new=batch.b_new[-1:],
                    state_idx=batch.state_idx[-1:],
                )
                total = part.weight * float(_eval(part.expr, ctx, last)[0])
            else:
                total = 0.0
            parts.append(PartScore(f"final[{i}]", total))
        artist_total += parts[-1].total
    if ast.flashback:
        parts.append(PartScore("flashback_bonus", bonus))
        artist_total += bonus

    f_rational = rational_score(belief_trace, cache)
    f_env = env_score(script_prefix)
    total = (
        artist_total
        + weights.rational_weight * f_rational
        + weights.env_weight * f_env
    )
    return ScoreBreakdown(
        total=total,
        artist_total=artist_total,
        parts=parts,
        rational_score=f_rational,
        env_score=f_env,
        weights=weights,
        zero_mass_flags=ctx.flags,
    )


def evaluate_script(
    ast: ObjectiveAST,
    script: Script,
    cache,
    weights: ObjectiveWeights = ObjectiveWeights(),
    horizon: Optional[int] = None,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[ScoreBreakdown, BeliefTrace]:
    """Trace the script and evaluate in one call."""
    belief_trace = run_trace(script, cache, epsilon)
    breakdown = evaluate(
        ast, script, belief_trace, cache, weights, horizon, epsilon
    )
    return breakdown, belief_trace
