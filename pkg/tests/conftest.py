from __future__ import annotations

from importlib import resources

import numpy as np
import pytest

from storyopt.optimizer import sample_initial_states
from storyopt.planner import build_policy_cache
from storyopt.world import DeusTransition, Script, legal_transitions, parse_layout


def shipped_map_text(name: str) -> str:
    return resources.files("storyopt").joinpath(f"maps/{name}.map").read_text()


MINI_MAP = shipped_map_text("mini")

# 1x3 corridor: pink under the parked robot, green at the far end.
CORRIDOR_MAP = "P.G\n"

# 2x2 micro world: smallest space that exercises pushing and the table.
MICRO_MAP = "PG\n..\n"

OPEN_5X4 = "P....\n.....\n.....\n....G\n"


@pytest.fixture(scope="session")
def mini_layout():
    return parse_layout(MINI_MAP)


@pytest.fixture(scope="session")
def mini_cache(mini_layout):
    return build_policy_cache(mini_layout, workers=1)


@pytest.fixture(scope="session")
def micro_layout():
    return parse_layout(MICRO_MAP)


@pytest.fixture(scope="session")
def micro_cache(micro_layout):
    return build_policy_cache(micro_layout, workers=1)


@pytest.fixture(scope="session")
def corridor_layout():
    return parse_layout(CORRIDOR_MAP)


def random_script(layout, n_steps, seed, deus=False) -> Script:
    """Uniformly random legal script for fuzz tests."""
    rng = np.random.default_rng(seed)
    table_mode = "absent" if deus else "sample"
    initial = sample_initial_states(layout, 1, seed, table_mode)[0]
    state = initial
    transitions = []
    deus_used = False
    for _ in range(n_steps):
        options = legal_transitions(
            layout, state, deus_available=deus and not deus_used
        )
        tr = options[int(rng.integers(len(options)))]
        if isinstance(tr, DeusTransition):
            deus_used = True
        transitions.append(tr)
        state = tr.next
    return Script(layout=layout, initial=initial, transitions=tuple(transitions))
