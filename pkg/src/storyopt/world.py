"""Kitchen grid domain: layouts, states, joint-action dynamics and rewards.

Two characters move on a rectangular grid: a strong robot that can push
things, and a weak cheese whose moves only succeed 60% of the time.  A
single table blocks the cheese but can be pushed by the robot.  Two floor
tiles, pink and green, act as goal markers.

Layout map format (one row per line, rectangular, newline-terminated):

    #   wall
    .   floor
    P   pink tile          G   green tile
    R   robot start        C   cheese start       T   table start

Both characters act each turn.  The robot resolves first (pushing the
cheese or the table one cell if it moves into them; the whole move fails
if the pushed entity's destination is blocked), then the cheese resolves
(its move fails when the success flag is false or the destination is
blocked).  Blocked moves are silent no-ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence, Union

import hashlib
import numpy as np

CHEESE_MOVE_SUCCESS = 0.6


class LayoutError(ValueError):
    """Raised for malformed or invalid layout maps."""


class Cell(NamedTuple):
    col: int
    row: int


class Action(IntEnum):
    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3
    STAY = 4


ACTIONS = (Action.NORTH, Action.SOUTH, Action.EAST, Action.WEST, Action.STAY)
N_ACTIONS = 5

# (dcol, drow); rows grow downward, so NORTH decreases row.
DELTAS = {
    Action.NORTH: (0, -1),
    Action.SOUTH: (0, 1),
    Action.EAST: (1, 0),
    Action.WEST: (-1, 0),
    Action.STAY: (0, 0),
}

ACTION_LETTERS = {
    Action.NORTH: "N",
    Action.SOUTH: "S",
    Action.EAST: "E",
    Action.WEST: "W",
    Action.STAY: "X",
}
LETTER_ACTIONS = {v: k for k, v in ACTION_LETTERS.items()}


@dataclass(frozen=True)
class RewardParams:
    """Per-step reward magnitudes; goal bonus must dominate the move cost."""

    goal_reward: float = 1.0
    move_cost: float = 0.1

    def __post_init__(self):
        if not self.goal_reward > self.move_cost > 0:
            raise ValueError(
                f"require goal_reward > move_cost > 0, got "
                f"{self.goal_reward} / {self.move_cost}"
            )


@dataclass(frozen=True)
class WorldLayout:
    width: int
    height: int
    walls: frozenset[Cell]
    pink: Cell
    green: Cell
    start_robot: Optional[Cell] = None
    start_cheese: Optional[Cell] = None
    start_table: Optional[Cell] = None

    def __post_init__(self):
        if self.pink == self.green:
            raise LayoutError("pink and green tiles must differ")
        for name, cell in (("pink", self.pink), ("green", self.green)):
            if cell in self.walls:
                raise LayoutError(f"{name} on wall at {cell}")
            if not self.in_bounds(cell):
                raise LayoutError(f"{name} out of bounds at {cell}")
        starts = [
            (n, c)
            for n, c in (
                ("robot", self.start_robot),
                ("cheese", self.start_cheese),
                ("table", self.start_table),
            )
            if c is not None
        ]
        for name, cell in starts:
            if cell in self.walls or not self.in_bounds(cell):
                raise LayoutError(f"{name} start on wall or out of bounds at {cell}")
        cells = [c for _, c in starts]
        if len(set(cells)) != len(cells):
            raise LayoutError("start positions must be mutually distinct")
        self._check_connected()

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell.col < self.width and 0 <= cell.row < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def free_cells(self) -> list[Cell]:
        """All non-wall cells in row-major order."""
        return [
            Cell(c, r)
            for r in range(self.height)
            for c in range(self.width)
            if Cell(c, r) not in self.walls
        ]

    def _check_connected(self):
        free = self.free_cells()
        if not free:
            raise LayoutError("layout has no floor cells")
        seen = {free[0]}
        stack = [free[0]]
        while stack:
            cur = stack.pop()
            for a in (Action.NORTH, Action.SOUTH, Action.EAST, Action.WEST):
                dc, dr = DELTAS[a]
                nxt = Cell(cur.col + dc, cur.row + dr)
                if self.is_free(nxt) and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        for cell in free:
            if cell not in seen:
                raise LayoutError(
                    f"floor not connected: cell unreachable at "
                    f"line {cell.row + 1}, column {cell.col + 1}"
                )

    def dynamics_hash(self) -> str:
        """Hash of everything that affects dynamics and planning.

        Start positions are excluded: they only seed sampling, so caches
        and scripts stay valid across start-variant maps.
        """
        walls = ";".join(f"{c},{r}" for c, r in sorted(self.walls))
        key = (
            f"{self.width}x{self.height}|walls={walls}"
            f"|pink={self.pink.col},{self.pink.row}"
            f"|green={self.green.col},{self.green.row}"
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def content_hash(self) -> str:
        """Hash including start positions (used in run manifests)."""
        parts = [self.dynamics_hash()]
        for c in (self.start_robot, self.start_cheese, self.start_table):
            parts.append("-" if c is None else f"{c.col},{c.row}")
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class WorldState:
    robot: Cell
    cheese: Cell
    table: Optional[Cell] = None

    def occupied(self) -> list[Cell]:
        cells = [self.robot, self.cheese]
        if self.table is not None:
            cells.append(self.table)
        return cells

    def validate(self, layout: WorldLayout):
        cells = self.occupied()
        if len(set(cells)) != len(cells):
            raise ValueError(f"overlapping entities in state {self}")
        for cell in cells:
            if not layout.is_free(cell):
                raise ValueError(f"entity on wall or out of bounds at {cell}")


@dataclass(frozen=True)
class JointTransition:
    robot_action: Action
    cheese_action: Action
    cheese_success: bool
    next: WorldState


@dataclass(frozen=True)
class DeusTransition:
    drop: Cell
    next: WorldState


Transition = Union[JointTransition, DeusTransition]


@dataclass(frozen=True)
class Script:
    """An initial state plus a chained sequence of transitions."""

    layout: WorldLayout
    initial: WorldState
    transitions: tuple[Transition, ...] = ()

    def __post_init__(self):
        self.initial.validate(self.layout)
        state = self.initial
        deus_count = 0
        for i, tr in enumerate(self.transitions):
            if isinstance(tr, DeusTransition):
                deus_count += 1
                if deus_count > 1:
                    raise ValueError(f"transition {i}: more than one deus event")
                if state.table is not None:
                    raise ValueError(f"transition {i}: deus with table present")
                expect = apply_deus(self.layout, state, tr.drop)
            else:
                expect = step(
                    self.layout,
                    state,
                    tr.robot_action,
                    tr.cheese_action,
                    tr.cheese_success,
                )
            if expect != tr.next:
                raise ValueError(
                    f"transition {i}: stored next state does not match resolution"
                )
            state = tr.next

    def __len__(self) -> int:
        return len(self.transitions)

    def states(self) -> list[WorldState]:
        out = [self.initial]
        for tr in self.transitions:
            out.append(tr.next)
        return out

    def final_state(self) -> WorldState:
        return self.transitions[-1].next if self.transitions else self.initial


GLYPHS = {"#", ".", "P", "G", "R", "C", "T"}


def parse_layout(text: str) -> WorldLayout:
    """Parse a layout map; raises LayoutError naming line/column on problems."""
    lines = text.replace("\r\n", "\n").split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise LayoutError("empty layout at line 1, column 1")
    width = len(lines[0])
    walls: set[Cell] = set()
    specials: dict[str, Cell] = {}
    for r, line in enumerate(lines):
        if len(line) != width:
            raise LayoutError(
                f"ragged row at line {r + 1}, column {len(line) + 1}: "
                f"expected width {width}"
            )
        for c, ch in enumerate(line):
            if ch not in GLYPHS:
                raise LayoutError(
                    f"unknown glyph {ch!r} at line {r + 1}, column {c + 1}"
                )
            if ch == "#":
                walls.add(Cell(c, r))
            elif ch != ".":
                if ch in specials:
                    raise LayoutError(
                        f"duplicate {ch!r} at line {r + 1}, column {c + 1}"
                    )
                specials[ch] = Cell(c, r)
    for need in ("P", "G"):
        if need not in specials:
            raise LayoutError(f"missing {need!r} tile at line 1, column 1")
    return WorldLayout(
        width=width,
        height=len(lines),
        walls=frozenset(walls),
        pink=specials["P"],
        green=specials["G"],
        start_robot=specials.get("R"),
        start_cheese=specials.get("C"),
        start_table=specials.get("T"),
    )


def layout_to_text(layout: WorldLayout) -> str:
    """Inverse of parse_layout for round-trip tests and exports."""
    grid = [["." for _ in range(layout.width)] for _ in range(layout.height)]
    for cell in layout.walls:
        grid[cell.row][cell.col] = "#"
    marks = [
        ("P", layout.pink),
        ("G", layout.green),
        ("R", layout.start_robot),
        ("C", layout.start_cheese),
        ("T", layout.start_table),
    ]
    for glyph, cell in marks:
        if cell is not None:
            grid[cell.row][cell.col] = glyph
    return "\n".join("".join(row) for row in grid) + "\n"


def step(
    layout: WorldLayout,
    state: WorldState,
    robot_action: Action,
    cheese_action: Action,
    cheese_success: bool,
) -> WorldState:
    """Resolve one joint turn deterministically.

    Robot first: moving into the cheese or table pushes it one cell; the
    whole move fails if the pushed entity's destination is blocked.  Then
    the cheese: its move fails when cheese_success is false or the
    destination is a wall, the table, the robot, or off-grid.
    """
    robot, cheese, table = state.robot, state.cheese, state.table

    dc, dr = DELTAS[robot_action]
    if dc or dr:
        dest = Cell(robot.col + dc, robot.row + dr)
        if layout.is_free(dest):
            if dest == cheese:
                beyond = Cell(dest.col + dc, dest.row + dr)
                if layout.is_free(beyond) and beyond != table:
                    robot, cheese = dest, beyond
            elif dest == table:
                beyond = Cell(dest.col + dc, dest.row + dr)
                if layout.is_free(beyond) and beyond != cheese:
                    robot, table = dest, beyond
            else:
                robot = dest

    dc, dr = DELTAS[cheese_action]
    if (dc or dr) and cheese_success:
        dest = Cell(cheese.col + dc, cheese.row + dr)
        if layout.is_free(dest) and dest != robot and dest != table:
            cheese = dest

    return WorldState(robot=robot, cheese=cheese, table=table)


def apply_deus(layout: WorldLayout, state: WorldState, drop: Cell) -> WorldState:
    """Drop the table at `drop`; both characters freeze for the turn."""
    if state.table is not None:
        raise ValueError("deus transition with table already present")
    if not layout.is_free(drop) or drop in (state.robot, state.cheese):
        raise ValueError(f"deus drop cell blocked at {drop}")
    return WorldState(robot=state.robot, cheese=state.cheese, table=drop)


def legal_transitions(
    layout: WorldLayout, state: WorldState, deus_available: bool = False
) -> list[Transition]:
    """All transitions out of `state`.

    Joint transitions cover the 5x5 action pairs; the success flag is
    expanded only when it changes the outcome (otherwise success=True is
    stored canonically).  Deus transitions are listed when allowed and the
    table is absent: one per free cell not occupied by a character.
    """
    out: list[Transition] = []
    for ra in ACTIONS:
        for ca in ACTIONS:
            ok = step(layout, state, ra, ca, True)
            fail = step(layout, state, ra, ca, False)
            if ok != fail:
                out.append(JointTransition(ra, ca, True, ok))
                out.append(JointTransition(ra, ca, False, fail))
            else:
                out.append(JointTransition(ra, ca, True, ok))
    if deus_available and state.table is None:
        occupied = (state.robot, state.cheese)
        for cell in layout.free_cells():
            if cell not in occupied:
                out.append(DeusTransition(cell, apply_deus(layout, state, cell)))
    return out


def reward(
    layout: WorldLayout,
    prev: WorldState,
    next_state: WorldState,
    moved_robot: bool,
    moved_cheese: bool,
    hypothesis,
    params: RewardParams,
) -> tuple[float, float]:
    """Per-turn (r_cheese, r_robot) under one hypothesis.

    Goal bonuses are judged on the post-transition state; the robot's
    social bonus couples it to the cheese's full reward for the turn.
    """
    goal = {"pink": layout.pink, "green": layout.green}
    r_cheese = 0.0
    if hypothesis.g_cheese is not None and next_state.cheese == goal[hypothesis.g_cheese]:
        r_cheese += params.goal_reward
    if moved_cheese:
        r_cheese -= params.move_cost
    r_robot = 0.0
    if hypothesis.g_robot is not None and next_state.robot == goal[hypothesis.g_robot]:
        r_robot += params.goal_reward
    if moved_robot:
        r_robot -= params.move_cost
    r_robot += hypothesis.rho * r_cheese
    return r_cheese, r_robot


@dataclass
class StateSpace:
    """Enumeration of all valid world states with a bijective index.

    Index layout is (robot, cheese, table)-major over the free-cell list;
    table index F means "absent".  The joint-transition tensor maps
    (state, robot action, cheese action, success flag) to the next state
    index and is shared by the planner and the optimizer.
    """

    layout: WorldLayout
    free: list[Cell] = field(init=False)
    n_states: int = field(init=False)

    def __post_init__(self):
        self.free = self.layout.free_cells()
        f = len(self.free)
        self._cell_index = {cell: i for i, cell in enumerate(self.free)}
        robots, cheeses, tables = [], [], []
        padded_to_dense = np.full(f * f * (f + 1), -1, dtype=np.int32)
        dense = 0
        for ri in range(f):
            for ci in range(f):
                if ci == ri:
                    continue
                for ti in range(f + 1):
                    if ti < f and (ti == ri or ti == ci):
                        continue
                    padded_to_dense[(ri * f + ci) * (f + 1) + ti] = dense
                    robots.append(ri)
                    cheeses.append(ci)
                    tables.append(ti)
                    dense += 1
        self.n_states = dense
        self._padded_to_dense = padded_to_dense
        self.robot_cell_index = np.array(robots, dtype=np.int32)
        self.cheese_cell_index = np.array(cheeses, dtype=np.int32)
        self.table_cell_index = np.array(tables, dtype=np.int32)
        self._next_tensor = None

    @property
    def n_free(self) -> int:
        return len(self.free)

    def cell_index(self, cell: Cell) -> int:
        return self._cell_index[cell]

    def index_of(self, state: WorldState) -> int:
        f = self.n_free
        ri = self._cell_index[state.robot]
        ci = self._cell_index[state.cheese]
        ti = f if state.table is None else self._cell_index[state.table]
        idx = int(self._padded_to_dense[(ri * f + ci) * (f + 1) + ti])
        if idx < 0:
            raise ValueError(f"invalid state {state}")
        return idx

    def state_of(self, index: int) -> WorldState:
        f = self.n_free
        ti = int(self.table_cell_index[index])
        return WorldState(
            robot=self.free[int(self.robot_cell_index[index])],
            cheese=self.free[int(self.cheese_cell_index[index])],
            table=None if ti == f else self.free[ti],
        )

    def on_tile(self, cell: Cell) -> np.ndarray:
        """Indicator over free-cell indices for one tile."""
        out = np.zeros(self.n_free, dtype=np.float64)
        out[self._cell_index[cell]] = 1.0
        return out

    def transition_tensor(self) -> np.ndarray:
        """(n_states, 5, 5, 2) next-state indices; [..., 0]=success, [..., 1]=failure."""
        if self._next_tensor is None:
            layout = self.layout
            nxt = np.empty((self.n_states, N_ACTIONS, N_ACTIONS, 2), dtype=np.int32)
            for s in range(self.n_states):
                state = self.state_of(s)
                for ra in ACTIONS:
                    for ca in ACTIONS:
                        nxt[s, ra, ca, 0] = self.index_of(
                            step(layout, state, ra, ca, True)
                        )
                        nxt[s, ra, ca, 1] = self.index_of(
                            step(layout, state, ra, ca, False)
                        )
            self._next_tensor = nxt
        return self._next_tensor


def enumerate_states(layout: WorldLayout) -> StateSpace:
    """All WorldStates over the layout, table ranging over free cells plus absent."""
    return StateSpace(layout)


def _enumerate_restricted(layout: WorldLayout, table_absent_only: bool) -> StateSpace:
    """StateSpace over a single closed dynamics component (test support)."""
    space = StateSpace(layout)
    f = space.n_free
    if table_absent_only:
        keep = space.table_cell_index == f
    else:
        keep = space.table_cell_index != f
    for name, arr in (
        ("robot_cell_index", space.robot_cell_index[keep]),
        ("cheese_cell_index", space.cheese_cell_index[keep]),
        ("table_cell_index", space.table_cell_index[keep]),
    ):
        setattr(space, name, arr)
    padded = np.full_like(space._padded_to_dense, -1)
    dense = 0
    for ri, ci, ti in zip(
        space.robot_cell_index, space.cheese_cell_index, space.table_cell_index
    ):
        padded[(int(ri) * f + int(ci)) * (f + 1) + int(ti)] = dense
        dense += 1
    space._padded_to_dense = padded
    space.n_states = dense
    space._next_tensor = None
    return space
