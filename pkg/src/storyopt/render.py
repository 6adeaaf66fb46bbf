"""Rendering: schematic SVG storyboards and matplotlib belief plots.

The storyboard is hand-built SVG text with fixed number formatting so
equal inputs produce byte-identical documents.  Panels read left to
right, one per timestep (T+1 including the initial state); arrows on a
panel show the actions taken next, and deus panels are marked.  An
optional strip beneath the panels tracks headline audience beliefs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .inference import BeliefTrace, trace_rows
from .world import Action, Cell, DeusTransition, DELTAS, JointTransition, Script

CELL = 20
CAPTION_H = 14
GAP = 10
STRIP_H = 80

WALL = "#3a3a3a"
FLOOR = "#fdfdfd"
GRID = "#e3e3e3"
PINK = "#f2a7cb"
GREEN = "#9fd49b"
ROBOT = "#3b6fb6"
CHEESE = "#e8b53a"
TABLE = "#8a5a2b"
DEUS = "#c9a227"


def _f(x: float) -> str:
    return f"{x:.1f}"


def _panel(
    layout, state, action_overlay, deus_overlay: Optional[Cell], x0: float, y0: float, t: int
) -> list[str]:
    parts = [f'<g transform="translate({_f(x0)},{_f(y0)})">']
    w, h = layout.width * CELL, layout.height * CELL
    parts.append(
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="{FLOOR}" stroke="{GRID}"/>'
    )
    for r in range(layout.height):
        for c in range(layout.width):
            cell = Cell(c, r)
            fill = None
            if cell in layout.walls:
                fill = WALL
            elif cell == layout.pink:
                fill = PINK
            elif cell == layout.green:
                fill = GREEN
            if fill:
                parts.append(
                    f'<rect x="{c * CELL}" y="{r * CELL}" width="{CELL}" '
                    f'height="{CELL}" fill="{fill}"/>'
                )
            parts.append(
                f'<rect x="{c * CELL}" y="{r * CELL}" width="{CELL}" '
                f'height="{CELL}" fill="none" stroke="{GRID}" stroke-width="0.5"/>'
            )
    if deus_overlay is not None:
        c, r = deus_overlay.col, deus_overlay.row
        parts.append(
            f'<rect x="{c * CELL + 1}" y="{r * CELL + 1}" width="{CELL - 2}" '
            f'height="{CELL - 2}" fill="none" stroke="{DEUS}" stroke-width="2" '
            f'stroke-dasharray="3,2"/>'
        )
    if state.table is not None:
        c, r = state.table.col, state.table.row
        parts.append(
            f'<rect x="{c * CELL + 2}" y="{r * CELL + 2}" width="{CELL - 4}" '
            f'height="{CELL - 4}" fill="{TABLE}" stroke="#5d3c1c"/>'
        )
    c, r = state.robot.col, state.robot.row
    parts.append(
        f'<rect x="{c * CELL + 3}" y="{r * CELL + 3}" width="{CELL - 6}" '
        f'height="{CELL - 6}" rx="3" fill="{ROBOT}"/>'
    )
    c, r = state.cheese.col, state.cheese.row
    parts.append(
        f'<rect x="{c * CELL + 5}" y="{r * CELL + 5}" width="{CELL - 10}" '
        f'height="{CELL - 10}" rx="2" fill="{CHEESE}" stroke="#b3871e"/>'
    )
    for mover, action, ok in action_overlay:
        if action == Action.STAY:
            continue
        cell = state.robot if mover == "robot" else state.cheese
        color = "#1d4e89" if mover == "robot" else "#c96f00"
        dc, dr = DELTAS[action]
        cx, cy = cell.col * CELL + CELL / 2, cell.row * CELL + CELL / 2
        ex, ey = cx + dc * CELL * 0.46, cy + dr * CELL * 0.46
        dash = "" if ok else ' stroke-dasharray="2,2"'
        parts.append(
            f'<line x1="{_f(cx)}" y1="{_f(cy)}" x2="{_f(ex)}" y2="{_f(ey)}" '
            f'stroke="{color}" stroke-width="2"{dash}/>'
        )
        # arrowhead triangle
        px, py = -dr, dc
        pts = (
            f"{_f(ex + dc * 4)},{_f(ey + dr * 4)} "
            f"{_f(ex + px * 3)},{_f(ey + py * 3)} "
            f"{_f(ex - px * 3)},{_f(ey - py * 3)}"
        )
        parts.append(f'<polygon points="{pts}" fill="{color}"/>')
    caption = f"t={t}"
    if deus_overlay is not None:
        caption += "  deus!"
        parts.append(
            f'<rect x="-1" y="-1" width="{w + 2}" height="{h + 2}" fill="none" '
            f'stroke="{DEUS}" stroke-width="2"/>'
        )
    parts.append(
        f'<text x="1" y="{h + CAPTION_H - 3}" font-family="monospace" '
        f'font-size="10" fill="#333">{caption}</text>'
    )
    parts.append("</g>")
    return parts


_STRIP_SERIES = (
    ("p_rho_pos_rat", "#2a7d2a", "P(rho>0 | rational)"),
    ("p_rho_neg_rat", "#b03a3a", "P(rho<0 | rational)"),
    ("p_rho_zero_rat", "#777777", "P(rho=0 | rational)"),
    ("p_rational_pair", "#1d1d1d", "P(rational)"),
)


def _strip(rows: Sequence[dict], x0: float, y0: float, width: float) -> list[str]:
    parts = [f'<g transform="translate({_f(x0)},{_f(y0)})">']
    plot_h = STRIP_H - 26
    parts.append(
        f'<rect x="0" y="0" width="{_f(width)}" height="{plot_h}" fill="#fafafa" '
        f'stroke="{GRID}"/>'
    )
    n = len(rows)
    for key, color, label in _STRIP_SERIES:
        pts = []
        for i, row in enumerate(rows):
            x = width * (i / max(n - 1, 1))
            y = plot_h * (1.0 - row[key])
            pts.append(f"{_f(x)},{_f(y)}")
        dash = ' stroke-dasharray="3,2"' if key == "p_rational_pair" else ""
        parts.append(
            f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash}/>'
        )
    legend = "   ".join(label for _, _, label in _STRIP_SERIES)
    parts.append(
        f'<text x="0" y="{plot_h + 12}" font-family="monospace" font-size="9" '
        f'fill="#333">{legend}</text>'
    )
    parts.append("</g>")
    return parts


def render_storyboard(
    script: Script,
    belief_trace: Optional[BeliefTrace] = None,
    hypotheses=None,
    panels_per_row: int = 8,
) -> str:
    """Render the script as an SVG comic strip; deterministic text output."""
    layout = script.layout
    states = script.states()
    n = len(states)
    panel_w = layout.width * CELL
    panel_h = layout.height * CELL + CAPTION_H
    cols = min(panels_per_row, n)
    rows_count = (n + cols - 1) // cols
    width = cols * panel_w + (cols - 1) * GAP + 2 * GAP
    height = rows_count * panel_h + (rows_count - 1) * GAP + 2 * GAP
    strip_rows = None
    if belief_trace is not None and hypotheses is not None:
        strip_rows = trace_rows(belief_trace, hypotheses)
        height += STRIP_H + GAP

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for t, state in enumerate(states):
        overlay = []
        deus_cell = None
        if t < len(script.transitions):
            tr = script.transitions[t]
            if isinstance(tr, JointTransition):
                overlay = [
                    ("robot", tr.robot_action, True),
                    ("cheese", tr.cheese_action, tr.cheese_success),
                ]
            elif isinstance(tr, DeusTransition):
                deus_cell = tr.drop
        col = t % cols
        row = t // cols
        x0 = GAP + col * (panel_w + GAP)
        y0 = GAP + row * (panel_h + GAP)
        parts.extend(_panel(layout, state, overlay, deus_cell, x0, y0, t))
    if strip_rows is not None:
        y0 = GAP + rows_count * (panel_h + GAP)
        parts.extend(_strip(strip_rows, GAP, y0, width - 2 * GAP))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_belief_figure(rows: Sequence[dict], path) -> None:
    """Five stacked panels tracking the audience's beliefs over time."""
    t = [row["t"] for row in rows]
    fig, axes = plt.subplots(5, 1, figsize=(7.0, 9.5), sharex=True)

    axes[0].plot(t, [r["p_cheese_pink_rat"] for r in rows], color="#d46aa8", label="pink")
    axes[0].plot(t, [r["p_cheese_green_rat"] for r in rows], color="#4c9a4c", label="green")
    axes[0].set_ylabel("P(G_cheese)")

    axes[1].plot(t, [r["p_robot_pink_rat"] for r in rows], color="#d46aa8", label="pink")
    axes[1].plot(t, [r["p_robot_green_rat"] for r in rows], color="#4c9a4c", label="green")
    axes[1].plot(t, [r["p_robot_none_rat"] for r in rows], color="#888888", label="none")
    axes[1].set_ylabel("P(G_robot)")

    axes[2].plot(t, [r["p_rho_pos_rat"] for r in rows], color="#2a7d2a", label="rho>0")
    axes[2].plot(t, [r["p_rho_zero_rat"] for r in rows], color="#888888", label="rho=0")
    axes[2].plot(t, [r["p_rho_neg_rat"] for r in rows], color="#b03a3a", label="rho<0")
    axes[2].set_ylabel("P(rho)")

    axes[3].plot(t, [r["p_rational_pair"] for r in rows], color="#1d1d1d")
    axes[3].set_ylabel("P(rational)")

    axes[4].plot(t, [r["ev_robot"] for r in rows], color="#3b6fb6", label="E[V_robot]")
    twin = axes[4].twinx()
    twin.plot(t, [r["kl_step"] for r in rows], color="#c96f00", label="KL step")
    twin.set_ylabel("KL step")
    axes[4].set_ylabel("E[V_robot]")
    axes[4].set_xlabel("t")

    for ax in axes[:4]:
        ax.set_ylim(-0.05, 1.05)
    for ax in axes[:3]:
        ax.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "storyopt"})
    plt.close(fig)
