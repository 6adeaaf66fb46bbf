"""Command-line surface: optimize / naive / infer / render / objectives / cache.

Every artifact-producing command writes a manifest.json carrying the tool
version, layout, settings and seed needed to reproduce its outputs
bit-for-bit (timestamps aside).  Exit codes: 0 success, 2 bad flags,
3 parse/validation errors, 4 search or planning failures.

The only environment variable consulted is STORYOPT_WORKERS (worker count
for planning and search); it never affects output bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from . import __version__
from .inference import DEFAULT_EPSILON, trace as run_trace, trace_rows, trace_to_csv
from .objectives import (
    BUILTIN_NAMES,
    ObjectiveSyntaxError,
    ObjectiveTypeError,
    builtin,
    builtin_source,
    parse_objective,
)
from .optimizer import (
    RHO_CLASSES,
    SearchConfig,
    naive_rollout,
    optimize,
    sample_scenario,
)
from .planner import (
    ConvergenceError,
    PlannerConfig,
    build_policy_cache,
    default_workers,
    load_cache,
    save_cache,
)
from .render import render_storyboard, save_belief_figure
from .scriptfile import ScriptValidationError, load_script, script_to_json
from .world import LayoutError, RewardParams, parse_layout

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SEARCH = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_layout(spec: str):
    """Resolve a path, or the name of a shipped map (kitchen, kitchen_deus, mini)."""
    path = Path(spec)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        candidate = resources.files("storyopt").joinpath(f"maps/{spec}.map")
        if "/" not in spec and candidate.is_file():
            text = candidate.read_text(encoding="utf-8")
        else:
            raise CliError(f"layout not found: {spec}", EXIT_PARSE)
    try:
        return parse_layout(text), text
    except LayoutError as exc:
        raise CliError(f"bad layout {spec}: {exc}", EXIT_PARSE) from exc


def _load_objective(spec: str):
    if spec in BUILTIN_NAMES:
        return builtin(spec), builtin_source(spec), spec
    path = Path(spec)
    if not path.exists():
        raise CliError(
            f"objective {spec!r} is neither a builtin "
            f"({', '.join(BUILTIN_NAMES)}) nor a file",
            EXIT_PARSE,
        )
    text = path.read_text(encoding="utf-8")
    try:
        return parse_objective(text), text, str(path)
    except (ObjectiveSyntaxError, ObjectiveTypeError) as exc:
        raise CliError(f"bad objective {spec}: {exc}", EXIT_PARSE) from exc


def _get_cache(layout, cache_path, workers):
    params = RewardParams()
    config = PlannerConfig()
    if cache_path:
        path = Path(cache_path)
        if path.exists():
            try:
                return load_cache(path, layout)
            except ValueError as exc:
                raise CliError(str(exc), EXIT_PARSE) from exc
        cache = _build_cache(layout, params, config, workers)
        save_cache(cache, path)
        return cache
    return _build_cache(layout, params, config, workers)


def _build_cache(layout, params, config, workers):
    try:
        return build_policy_cache(
            layout, params=params, config=config, workers=workers
        )
    except ConvergenceError as exc:
        raise CliError(f"planning failed: {exc}", EXIT_SEARCH) from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, layout, layout_text,
                    cache, started: str, files: list[str], extra: dict | None = None):
    manifest = {
        "tool": {"name": "storyopt", "version": __version__},
        "command": command,
        "args": args,
        "layout": {
            "text": layout_text,
            "content_hash": layout.content_hash(),
            "dynamics_hash": layout.dynamics_hash(),
        },
        "settings": {
            "planner": {
                "gamma": cache.config.gamma,
                "beta": cache.config.beta,
                "residual_tol": cache.config.residual_tol,
                "max_iterations": cache.config.max_iterations,
            },
            "reward": {
                "goal_reward": cache.params.goal_reward,
                "move_cost": cache.params.move_cost,
            },
            "inference": {"epsilon": DEFAULT_EPSILON},
        },
        "cache_hash": cache.cache_hash(),
        "timestamps": {
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
        },
        "outputs": {name: _sha256(out_dir / name) for name in files},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _emit_artifacts(out_dir: Path, script, belief_trace, cache) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "script.json").write_text(script_to_json(script))
    (out_dir / "beliefs.csv").write_text(trace_to_csv(belief_trace, cache.hypotheses))
    svg = render_storyboard(script, belief_trace, cache.hypotheses)
    (out_dir / "storyboard.svg").write_text(svg)
    save_belief_figure(
        trace_rows(belief_trace, cache.hypotheses), out_dir / "beliefs.png"
    )
    return ["script.json", "beliefs.csv", "storyboard.svg", "beliefs.png"]


def cmd_optimize(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    layout, layout_text = _load_layout(args.layout)
    objective, objective_text, objective_name = _load_objective(args.objective)
    beam = args.beam
    if beam is None:
        beam = 100 if objective_name.startswith("flashback") else 1
    workers = default_workers()
    cache = _get_cache(layout, args.cache, workers)
    config = SearchConfig(
        horizon=args.steps,
        beam_width=beam,
        n_initial_states=args.starts,
        rng_seed=args.seed,
        deus_enabled=args.deus,
    )
    progress = None
    if args.progress:
        progress = lambda i, score, evals: print(
            f"start {i}: best {score:.6f} ({evals} prefix evals)", file=sys.stderr
        )
    try:
        result = optimize(
            layout, objective, cache, config, workers=workers, progress=progress
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except Exception as exc:
        raise CliError(f"search failed: {exc}", EXIT_SEARCH) from exc
    out_dir = Path(args.out)
    belief_trace = run_trace(result.script, cache)
    files = _emit_artifacts(out_dir, result.script, belief_trace, cache)
    _write_manifest(
        out_dir,
        "optimize",
        {
            "layout": args.layout,
            "objective": objective_name,
            "objective_text": objective_text,
            "steps": args.steps,
            "beam": beam,
            "starts": args.starts,
            "seed": args.seed,
            "deus": args.deus,
        },
        layout,
        layout_text,
        cache,
        started,
        files,
        extra={
            "search": {
                "best_score": result.breakdown.total,
                "best_start_index": result.best_start_index,
                "wall_time_s": round(result.wall_time, 3),
                "prefix_evals": result.prefix_evals,
            }
        },
    )
    print(
        f"best score {result.breakdown.total:.6f} "
        f"(artist {result.breakdown.artist_total:.6f}, "
        f"rational {result.breakdown.rational_score:.6f}, "
        f"env {result.breakdown.env_score:.6f}) -> {out_dir}"
    )
    return EXIT_OK


def cmd_naive(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    layout, layout_text = _load_layout(args.layout)
    workers = default_workers()
    cache = _get_cache(layout, args.cache, workers)
    hypothesis, initial = sample_scenario(layout, args.rho, args.seed)
    script = naive_rollout(layout, hypothesis, initial, args.steps, args.seed, cache)
    out_dir = Path(args.out)
    belief_trace = run_trace(script, cache)
    files = _emit_artifacts(out_dir, script, belief_trace, cache)
    _write_manifest(
        out_dir,
        "naive",
        {
            "layout": args.layout,
            "rho": args.rho,
            "steps": args.steps,
            "seed": args.seed,
        },
        layout,
        layout_text,
        cache,
        started,
        files,
        extra={
            "scenario": {
                "g_cheese": hypothesis.g_cheese,
                "g_robot": hypothesis.g_robot,
                "rho": hypothesis.rho,
            }
        },
    )
    print(f"naive {args.rho} rollout (rho={hypothesis.rho}) -> {out_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    layout, layout_text = _load_layout(args.layout)
    workers = default_workers()
    cache = _get_cache(layout, args.cache, workers)
    try:
        script = load_script(args.script, layout)
    except ScriptValidationError as exc:
        raise CliError(f"bad script {args.script}: {exc}", EXIT_PARSE) from exc
    belief_trace = run_trace(script, cache)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "beliefs.csv").write_text(trace_to_csv(belief_trace, cache.hypotheses))
    save_belief_figure(
        trace_rows(belief_trace, cache.hypotheses), out_dir / "beliefs.png"
    )
    _write_manifest(
        out_dir,
        "infer",
        {"layout": args.layout, "script": str(args.script)},
        layout,
        layout_text,
        cache,
        started,
        ["beliefs.csv", "beliefs.png"],
    )
    print(f"belief trace ({len(script)} steps) -> {out_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    layout, layout_text = _load_layout(args.layout)
    try:
        script = load_script(args.script, layout)
    except ScriptValidationError as exc:
        raise CliError(f"bad script {args.script}: {exc}", EXIT_PARSE) from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    svg = render_storyboard(script)
    (out_dir / "storyboard.svg").write_text(svg)
    files = ["storyboard.svg"]
    if args.beliefs:
        import csv as csv_mod

        with open(args.beliefs, newline="") as fh:
            rows = []
            for row in csv_mod.DictReader(fh):
                rows.append(
                    {k: (int(v) if k == "t" else float(v)) for k, v in row.items()}
                )
        save_belief_figure(rows, out_dir / "beliefs.png")
        files.append("beliefs.png")
    print(f"storyboard ({len(script) + 1} panels) -> {out_dir}")
    return EXIT_OK


def cmd_objectives(args) -> int:
    for name in BUILTIN_NAMES:
        source = builtin_source(name).strip()
        print(f"{name:24s} {source}")
    return EXIT_OK


def cmd_cache(args) -> int:
    layout, _ = _load_layout(args.layout)
    workers = default_workers()
    cache = _build_cache(layout, RewardParams(), PlannerConfig(), workers)
    save_cache(cache, args.out)
    print(f"cache {cache.cache_hash()} ({cache.n_hypotheses} hypotheses) -> {args.out}")
    return EXIT_OK


def _apply_config_file(args, parser):
    """Fill unset flags from a JSON config file; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}", EXIT_PARSE)
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"bad config file {path}: {exc}", EXIT_PARSE) from exc
    for key, value in values.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)
    return args


_DEFAULTS = {"steps": 15, "starts": 500, "seed": 0}


def _finalize_defaults(args):
    for key, value in _DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    return args


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storyopt",
        description="Optimize grid-world animation scripts against a simulated audience",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--layout", required=True, help="layout map path or shipped name")
        p.add_argument("--cache", help="policy cache file (built there if missing)")
        p.add_argument("--config", help="JSON config file mirroring flags (flags win)")

    p = sub.add_parser("optimize", help="search for a script maximizing an objective")
    common(p)
    p.add_argument("--objective", required=True, help="builtin name or DSL file path")
    p.add_argument("--steps", type=int, default=None, help="script length T (default 15)")
    p.add_argument(
        "--beam",
        type=int,
        default=None,
        help="beam width (default 1; 100 for flashback objectives)",
    )
    p.add_argument("--starts", type=int, default=None, help="initial states (default 500)")
    p.add_argument("--seed", type=int, default=None, help="rng seed (default 0)")
    p.add_argument("--deus", action="store_true", help="allow one deus table drop")
    p.add_argument("--progress", action="store_true", help="per-start progress on stderr")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("naive", help="roll out optimal policies for a random scenario")
    common(p)
    p.add_argument("--rho", required=True, choices=sorted(RHO_CLASSES))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_naive)

    p = sub.add_parser("infer", help="run the audience model over a script file")
    common(p)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="render a storyboard from a script file")
    p.add_argument("--layout", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--beliefs", help="beliefs.csv to plot alongside")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("objectives", help="list builtin objectives")
    p.add_argument(
        "action", nargs="?", default="list", choices=["list"], help="subcommand"
    )
    p.set_defaults(func=cmd_objectives)

    p = sub.add_parser("cache", help="policy cache maintenance")
    cache_sub = p.add_subparsers(dest="cache_command", required=True)
    pb = cache_sub.add_parser("build", help="build and save a policy cache")
    pb.add_argument("--layout", required=True)
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=cmd_cache)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args, parser)
        args = _finalize_defaults(args)
        return args.func(args)
    except CliError as exc:
        print(f"storyopt: error: {exc}", file=sys.stderr)
        return exc.code
    except (LayoutError, ScriptValidationError, ObjectiveSyntaxError,
            ObjectiveTypeError) as exc:
        print(f"storyopt: error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConvergenceError as exc:
        print(f"storyopt: error: {exc}", file=sys.stderr)
        return EXIT_SEARCH


def run_from_manifest(manifest_path, out_dir, cache_path=None) -> int:
    """Replay a recorded run; outputs must be byte-identical to the originals."""
    manifest = json.loads(Path(manifest_path).read_text())
    command = manifest["command"]
    args = manifest["args"]
    argv = [command]
    if command == "optimize":
        argv += [
            "--layout", args["layout"],
            "--objective", args["objective"],
            "--steps", str(args["steps"]),
            "--beam", str(args["beam"]),
            "--starts", str(args["starts"]),
            "--seed", str(args["seed"]),
            "--out", str(out_dir),
        ]
        if args.get("deus"):
            argv.append("--deus")
    elif command == "naive":
        argv += [
            "--layout", args["layout"],
            "--rho", args["rho"],
            "--steps", str(args["steps"]),
            "--seed", str(args["seed"]),
            "--out", str(out_dir),
        ]
    elif command == "infer":
        argv += [
            "--layout", args["layout"],
            "--script", args["script"],
            "--out", str(out_dir),
        ]
    else:
        raise ValueError(f"manifest for unsupported command {command!r}")
    if cache_path:
        argv += ["--cache", str(cache_path)]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
