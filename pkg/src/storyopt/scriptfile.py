"""Script JSON serialization.

Files store the initial state and the transition inputs only; next states
are recomputed on load, so a file can never describe an inconsistent
chain.  Actions are encoded as single letters (N/S/E/W, X for stay) and
the layout is referenced by its dynamics hash.
"""

from __future__ import annotations

import json

from .world import (
    ACTION_LETTERS,
    Cell,
    DeusTransition,
    JointTransition,
    LETTER_ACTIONS,
    Script,
    WorldLayout,
    WorldState,
    apply_deus,
    step,
)


class ScriptValidationError(ValueError):
    """Invalid script JSON; `pointer` locates the offending element."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


def script_to_dict(script: Script) -> dict:
    def cell(c: Cell):
        return [c.col, c.row]

    transitions = []
    for tr in script.transitions:
        if isinstance(tr, JointTransition):
            transitions.append(
                {
                    "type": "joint",
                    "robot": ACTION_LETTERS[tr.robot_action],
                    "cheese": ACTION_LETTERS[tr.cheese_action],
                    "success": tr.cheese_success,
                }
            )
        else:
            transitions.append({"type": "deus", "cell": cell(tr.drop)})
    return {
        "layout_hash": script.layout.dynamics_hash(),
        "initial": {
            "robot": cell(script.initial.robot),
            "cheese": cell(script.initial.cheese),
            "table": None if script.initial.table is None else cell(script.initial.table),
        },
        "transitions": transitions,
    }


def script_to_json(script: Script) -> str:
    return json.dumps(script_to_dict(script), indent=2) + "\n"


def _parse_cell(value, pointer: str) -> Cell:
    if (
        not isinstance(value, list)
        or len(value) != 2
        or not all(isinstance(v, int) for v in value)
    ):
        raise ScriptValidationError("expected a [col, row] pair", pointer)
    return Cell(value[0], value[1])


def script_from_dict(data: dict, layout: WorldLayout) -> Script:
    """Rebuild a Script, recomputing every next state from the dynamics."""
    if not isinstance(data, dict):
        raise ScriptValidationError("expected a JSON object")
    if data.get("layout_hash") != layout.dynamics_hash():
        raise ScriptValidationError(
            f"script was recorded for layout {data.get('layout_hash')!r}, "
            f"not {layout.dynamics_hash()!r}",
            "/layout_hash",
        )
    init = data.get("initial")
    if not isinstance(init, dict):
        raise ScriptValidationError("expected an object", "/initial")
    table = init.get("table")
    state = WorldState(
        robot=_parse_cell(init.get("robot"), "/initial/robot"),
        cheese=_parse_cell(init.get("cheese"), "/initial/cheese"),
        table=None if table is None else _parse_cell(table, "/initial/table"),
    )
    try:
        state.validate(layout)
    except ValueError as exc:
        raise ScriptValidationError(str(exc), "/initial") from exc

    raw = data.get("transitions")
    if not isinstance(raw, list):
        raise ScriptValidationError("expected an array", "/transitions")
    transitions = []
    current = state
    deus_seen = False
    for i, item in enumerate(raw):
        pointer = f"/transitions/{i}"
        if not isinstance(item, dict):
            raise ScriptValidationError("expected an object", pointer)
        kind = item.get("type")
        if kind == "joint":
            try:
                ra = LETTER_ACTIONS[item["robot"]]
                ca = LETTER_ACTIONS[item["cheese"]]
            except KeyError as exc:
                raise ScriptValidationError(
                    f"bad action letter {exc.args[0]!r}", pointer
                ) from exc
            success = item.get("success")
            if not isinstance(success, bool):
                raise ScriptValidationError("success must be a boolean", pointer)
            nxt = step(layout, current, ra, ca, success)
            transitions.append(JointTransition(ra, ca, success, nxt))
        elif kind == "deus":
            if deus_seen:
                raise ScriptValidationError("more than one deus event", pointer)
            deus_seen = True
            drop = _parse_cell(item.get("cell"), pointer + "/cell")
            try:
                nxt = apply_deus(layout, current, drop)
            except ValueError as exc:
                raise ScriptValidationError(str(exc), pointer) from exc
            transitions.append(DeusTransition(drop, nxt))
        else:
            raise ScriptValidationError(f"unknown transition type {kind!r}", pointer)
        current = nxt
    try:
        return Script(layout=layout, initial=state, transitions=tuple(transitions))
    except ValueError as exc:
        raise ScriptValidationError(str(exc), "/transitions") from exc


def load_script(path, layout: WorldLayout) -> Script:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScriptValidationError(f"invalid JSON: {exc}") from exc
    return script_from_dict(data, layout)


def save_script(script: Script, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(script_to_json(script))
