"""storyopt: optimize grid-world animation scripts against a simulated audience.

The library plans two characters (a pushing robot and a weak cheese) with
exact value iteration, inverts those plans into a Bayesian audience model,
and beam-searches for scripts whose belief trajectories maximize an
artist-written objective.
"""

__version__ = "0.1.0"

from .inference import (
    Belief,
    BeliefTrace,
    Hypothesis,
    build_hypothesis_space,
    expected_robot_value,
    kl_divergence,
    observe,
    query,
    trace,
    uniform_prior,
)
from .objectives import (
    ObjectiveWeights,
    builtin,
    env_score,
    evaluate,
    evaluate_script,
    parse_objective,
    rational_score,
)
from .optimizer import (
    SearchConfig,
    SearchResult,
    naive_rollout,
    optimize,
    sample_initial_states,
)
from .planner import (
    PlannerConfig,
    PolicyCache,
    action_likelihood,
    build_policy_cache,
    load_cache,
    plan_cheese,
    plan_robot,
    save_cache,
)
from .world import (
    Action,
    Cell,
    RewardParams,
    Script,
    WorldLayout,
    WorldState,
    enumerate_states,
    legal_transitions,
    parse_layout,
    reward,
    step,
)
