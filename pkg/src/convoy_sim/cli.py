"""Command-line front end.

Subcommands:

* ``run``       one scenario -> ``<out>/<scenario>/<seed>/trace.csv`` + ``summary.json``
* ``batch``     one scenario over N seeds -> per-seed outputs + ``aggregate.json``
* ``seed-pool`` generate a curated experience pool from oracle runs
* ``replay``    recompute stats and render figures from an existing trace

Flags mirror the JSON config file one-to-one; flags win over the file.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import report
from .backends import (BackendConfig, ENDPOINT_ENV_VAR, MODEL_ENV_VAR)
from .memory import ExperiencePool
from .scenarios import (ScenarioConfig, run_batch, run_scenario, write_summary)
from .world import Task

_SCENARIO_ALIASES = {
    "avoid": Task.AVOID_OBSTACLES,
    "avoid_obstacles": Task.AVOID_OBSTACLES,
    "join": Task.JOIN_CONVOY,
    "join_convoy": Task.JOIN_CONVOY,
    "leave": Task.LEAVE_CONVOY,
    "leave_convoy": Task.LEAVE_CONVOY,
    "escort": Task.ESCORT_SWITCH,
    "escort_switch": Task.ESCORT_SWITCH,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Spec'd exit codes: usage errors are 1, not argparse's default 2.
    def error(self, message):
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", help="avoid | join | leave | escort")
    parser.add_argument("--density", type=int,
                        help="environment vehicle count (avoid scenario)")
    parser.add_argument("--backend", choices=["oracle", "llm_http"],
                        help="decision backend (default oracle)")
    parser.add_argument("--endpoint",
                        help=f"chat-completions URL (or env {ENDPOINT_ENV_VAR})")
    parser.add_argument("--model",
                        help=f"model name (or env {MODEL_ENV_VAR})")
    parser.add_argument("--timeout", type=float, help="request timeout, s")
    parser.add_argument("--out", help="output directory (default ./out)")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--pool", help="experience pool (JSON lines) for few-shot retrieval")
    parser.add_argument("--dt", type=float, help="simulation step, s (default 0.1)")
    parser.add_argument("--decision-period", type=float,
                        help="decision period, s (default 1.0)")
    parser.add_argument("--max-sim-time", type=float,
                        help="timeout horizon, s (default 120)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convoy-sim",
                     description="Multi-lane highway convoy simulator")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_run = sub.add_parser("run", parents=[], help="run one scenario")
    _add_common(p_run)
    p_run.add_argument("--seed", type=int, help="run seed (default 0)")
    p_run.add_argument("--figures", action="store_true",
                       help="also render figures for the run")

    p_batch = sub.add_parser("batch", help="run one scenario over many seeds")
    _add_common(p_batch)
    p_batch.add_argument("--seeds", type=int, help="number of seeds (default 50)")
    p_batch.add_argument("--seed", type=int,
                         help="first seed of the sweep (default 0)")
    p_batch.add_argument("--workers", type=int,
                         help="parallel worker processes (default CPU count)")
    p_batch.add_argument("--figures", action="store_true",
                         help="also render the average-speed histogram")

    p_pool = sub.add_parser("seed-pool",
                            help="generate a curated experience pool from oracle runs")
    _add_common(p_pool)
    p_pool.add_argument("--pool-out", default="pools/seed_pool.jsonl",
                        help="output JSON-lines file")
    p_pool.add_argument("--per-task", type=int, default=40,
                        help="max experiences kept per task area")

    p_replay = sub.add_parser("replay",
                              help="re-render stats and figures from a trace CSV")
    p_replay.add_argument("--trace", required=True, help="trace.csv to replay")
    p_replay.add_argument("--out", help="directory for figures and replay stats "
                                        "(default: next to the trace)")
    return parser


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _setting(args: argparse.Namespace, file_cfg: dict, name: str, default):
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in file_cfg:
        return file_cfg[name]
    return default


def _backend_from(args: argparse.Namespace, file_cfg: dict) -> BackendConfig:
    kind = _setting(args, file_cfg, "backend", "oracle")
    endpoint = _setting(args, file_cfg, "endpoint",
                        os.environ.get(ENDPOINT_ENV_VAR) or None)
    model = _setting(args, file_cfg, "model",
                     os.environ.get(MODEL_ENV_VAR) or "llama-3.3")
    timeout = _setting(args, file_cfg, "timeout", 30.0)
    cfg = BackendConfig(kind=kind, endpoint=endpoint, model=model,
                        timeout=float(timeout))
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _scenario_from(args: argparse.Namespace, file_cfg: dict) -> ScenarioConfig:
    raw_kind = _setting(args, file_cfg, "scenario", None)
    if raw_kind is None:
        raise UsageError("--scenario is required")
    kind = _SCENARIO_ALIASES.get(str(raw_kind).lower())
    if kind is None:
        raise UsageError(f"unknown scenario {raw_kind!r}; "
                         f"choose from avoid, join, leave, escort")
    return ScenarioConfig(
        kind=kind,
        seed=int(_setting(args, file_cfg, "seed", 0)),
        env_vehicle_count=_setting(args, file_cfg, "density", None),
        dt=float(_setting(args, file_cfg, "dt", 0.1)),
        decision_period=float(_setting(args, file_cfg, "decision-period",
                                       _setting(args, file_cfg, "decision_period", 1.0))),
        max_sim_time=float(_setting(args, file_cfg, "max-sim-time",
                                    _setting(args, file_cfg, "max_sim_time", 120.0))),
        backend=_backend_from(args, file_cfg),
        pool_path=_setting(args, file_cfg, "pool", None),
    )


def _cmd_run(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _scenario_from(args, file_cfg)
    out_dir = Path(_setting(args, file_cfg, "out", "out"))
    run_dir = out_dir / cfg.kind.value / str(cfg.seed)
    trace_path = run_dir / "trace.csv"
    summary = run_scenario(cfg, trace_path=trace_path)
    write_summary(summary, run_dir / "summary.json")
    if args.figures:
        report.render_run_figures(report.read_trace(trace_path), run_dir)
    status = "success" if summary.success else f"failure ({summary.failure_reason})"
    print(f"{cfg.kind.value} seed {cfg.seed}: {status}, "
          f"avg speed {summary.avg_convoy_speed:.2f} m/s, "
          f"duration {summary.duration:.1f} s -> {run_dir}")
    return 0


def _cmd_batch(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _scenario_from(args, file_cfg)
    out_dir = Path(_setting(args, file_cfg, "out", "out"))
    count = int(_setting(args, file_cfg, "seeds", 50))
    first = int(_setting(args, file_cfg, "seed", 0))
    workers = int(_setting(args, file_cfg, "workers", os.cpu_count() or 1))
    if count < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = list(range(first, first + count))
    aggregate = run_batch(cfg, seeds, out_dir=out_dir, workers=workers)
    scenario_dir = out_dir / cfg.kind.value
    if args.figures:
        report.render_batch_figure(scenario_dir / "aggregate.json", scenario_dir)
    print(f"{cfg.kind.value} density {aggregate['density']}: "
          f"{aggregate['successes']}/{aggregate['count']} succeeded "
          f"(rate {aggregate['success_rate']:.2f}), "
          f"mean avg speed {aggregate['avg_speed_mean']:.2f} m/s "
          f"-> {out_dir / cfg.kind.value / 'aggregate.json'}")
    return 0


_POOL_PROTOCOL = (
    (Task.AVOID_OBSTACLES, 20, (101, 102, 103)),
    (Task.JOIN_CONVOY, 0, (1,)),
    (Task.LEAVE_CONVOY, 0, (1,)),
    (Task.ESCORT_SWITCH, 0, (1,)),
)


def _cmd_seed_pool(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    per_task = int(args.per_task)
    pool = ExperiencePool()
    for kind, density, seeds in _POOL_PROTOCOL:
        collected = []
        for seed in seeds:
            cfg = ScenarioConfig(kind=kind, seed=seed, env_vehicle_count=density)
            summary = run_scenario(cfg)
            if not summary.success:
                if args.verbose:
                    print(f"skipping {kind.value} seed {seed}: "
                          f"{summary.failure_reason}", file=sys.stderr)
                continue
            collected.extend(e for e in summary.experiences if e.task is kind)
        # Thin evenly so the pool spans whole maneuvers, not just their starts.
        stride = max(1, len(collected) // per_task)
        for exp in collected[::stride][:per_task]:
            pool.store(exp)
    out_path = Path(args.pool_out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pool.persist(out_path)
    sizes = {task.value: pool.size(task) for task in pool.areas}
    print(f"wrote {pool.size()} experiences to {out_path} ({sizes})")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise UsageError(f"trace file not found: {trace_path}")
    out_dir = Path(args.out) if args.out else trace_path.parent
    rows = report.read_trace(trace_path)
    stats = report.trace_stats(rows)
    figures = report.render_run_figures(rows, out_dir)
    stats_path = out_dir / "replay_stats.json"
    with stats_path.open("w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(stats, indent=2, sort_keys=True))
    print(f"figures: {', '.join(str(p) for p in figures)}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    handlers = {
        "run": _cmd_run,
        "batch": _cmd_batch,
        "seed-pool": _cmd_seed_pool,
        "replay": _cmd_replay,
    }
    try:
        return handlers[args.subcommand](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level error report
        print(f"runtime error in {_failing_module(exc)}: {exc}", file=sys.stderr)
        return 2


def _failing_module(exc: BaseException) -> str:
    """Name the innermost package module on the exception's traceback."""
    module = type(exc).__module__
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("convoy_sim"):
            module = name
        tb = tb.tb_next
    return module


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
