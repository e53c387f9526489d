"""Command-line entry points: run, evolve, evaluate, attribute, inspect, replay."""

import argparse
import asyncio
import difflib
import json
import logging
import shlex
import sys
from collections.abc import Sequence
from decimal import Decimal
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ValidationError, field_validator

from . import config
from .attribution import SCHEMES, SchemeConfig, attribute_many
from .clock import Clock, FakeClock, SystemClock
from .database import ExperienceIndex
from .errors import GateRejected, MetaTeamError, SchemaError
from .evaluators import CommandEvaluator, Evaluator, ExpectedAnswerEvaluator
from .evolution import EvolutionSettings, check_scaffold, evaluate_team, run_evolution
from .model_gateway import ModelGateway, ScriptedGateway, WireGateway, load_script
from .runtime_bus import load_budget_profile, run_task
from .scaffold_store import ScaffoldStore, load_team
from .team_templates import TEMPLATES, write_template
from .trace_store import export_experience, import_annotated, load_experience, serialize
from .types import Budget, Experience, Task

logger = logging.getLogger(__name__)

EXIT_CODES = """exit codes:
  0  success (including force-finalized episodes)
  1  runtime, attribution or evolution error
  2  scaffold error or bad arguments (missing manifest, malformed agent dir, ...)
  3  trace error (schema error, refusing to overwrite an experience)
  4  model gateway error (unavailable, rejected request, exhausted script)
  5  evaluator failure
  6  commit gate rejected the scaffold
  7  replay diverged from the recorded trace
"""

REPLAY_DIVERGED = 7


class RunSpec(BaseModel):
    """Where a command reads its team and tasks and which backend it talks to."""

    team: Path
    tasks: Path
    budget: Budget
    backend: str = "wire"
    out: Path

    @field_validator("backend")
    @classmethod
    def _one_backend(cls, value: str) -> str:
        kind, _, path = value.partition(":")
        if not ((kind == "wire" and not path) or (kind == "scripted" and path)):
            raise ValueError(f"backend must be 'wire' or 'scripted:<script.yaml>', not {value!r}")
        return value

    @field_validator("out")
    @classmethod
    def _writable(cls, value: Path) -> Path:
        if value.exists() and not value.is_dir():
            raise ValueError(f"output path {value} is not a directory")
        return value


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def load_tasks(path: str | Path) -> list[Task]:
    """Tasks from YAML/JSON (one mapping, a list, or ``{tasks: [...]}``) or JSONL."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".jsonl":
            data: Any = [json.loads(line) for line in text.splitlines() if line.strip()]
        else:
            data = yaml.safe_load(text)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read tasks from {path}: {e}") from e
    if isinstance(data, dict):
        data = data.get("tasks", [data])
    if not isinstance(data, list):
        raise SchemaError(f"{path} holds no task list")
    try:
        return [Task.model_validate(item) for item in data]
    except ValidationError as e:
        raise SchemaError(f"invalid task in {path}: {e.errors()[0]['msg']}") from e


def _budget(args: argparse.Namespace) -> Budget:
    budget = load_budget_profile(args.budget)
    updates: dict[str, Any] = {}
    if args.max_seconds is not None:
        updates["max_seconds"] = args.max_seconds
    if args.max_messages is not None:
        updates["max_messages"] = args.max_messages
    if args.max_cost is not None:
        updates["max_cost"] = Decimal(args.max_cost)
    return Budget.model_validate({**budget.model_dump(), **updates}) if updates else budget


def _spec(args: argparse.Namespace) -> RunSpec:
    return RunSpec(
        team=args.team,
        tasks=getattr(args, "tasks", None) or getattr(args, "task", None) or Path("."),
        budget=_budget(args),
        backend=args.backend,
        out=args.out,
    )


def _clock(args: argparse.Namespace) -> Clock:
    return FakeClock() if args.fixed_clock else SystemClock()


def _gateway(backend: str, clock: Clock) -> ModelGateway:
    kind, _, path = backend.partition(":")
    if kind == "scripted" and path:
        return ScriptedGateway(load_script(path), clock)
    if kind == "wire" and not path:
        return WireGateway(clock=clock)
    raise ValueError(f"backend must be 'wire' or 'scripted:<script.yaml>', not {backend!r}")


async def _close(gateway: ModelGateway) -> None:
    if isinstance(gateway, WireGateway):
        await gateway.aclose()


def _evaluator(args: argparse.Namespace) -> Evaluator:
    if args.eval_command:
        return CommandEvaluator(shlex.split(args.eval_command))
    return ExpectedAnswerEvaluator()


def _print(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))


# Commands


async def cmd_run(args: argparse.Namespace) -> int:
    spec = _spec(args)
    team = load_team(spec.team)
    tasks = load_tasks(spec.tasks)
    if len(tasks) != 1:
        raise ValueError(f"run takes exactly one task; {spec.tasks} holds {len(tasks)}")
    clock = _clock(args)
    gateway = _gateway(spec.backend, clock)
    try:
        experience = await run_task(team, tasks[0], spec.budget, gateway, _evaluator(args), clock)
    finally:
        await _close(gateway)
    path = export_experience(experience, spec.out / f"{experience.episode_id}.jsonl")
    _print({"experience": str(path), "outcome": experience.outcome.model_dump(mode="json")})
    return 0


async def cmd_evolve(args: argparse.Namespace) -> int:
    spec = _spec(args)
    tasks = load_tasks(spec.tasks)
    settings = EvolutionSettings(
        scales=frozenset(s.strip() for s in args.scales.split(",") if s.strip()),
        exchange=args.exchange,
    )
    clock = _clock(args)
    gateway = _gateway(spec.backend, clock)
    index = ExperienceIndex.from_url(args.index) if args.index else None
    if index is not None:
        await index.init()
    try:
        result = await run_evolution(
            ScaffoldStore(spec.team),
            tasks,
            gateway,
            _evaluator(args),
            spec.budget,
            spec.budget.scaled(args.evolution_budget_scale),
            spec.out,
            settings=settings,
            clock=clock,
            index=index,
            resume=args.resume,
        )
    finally:
        await _close(gateway)
        if index is not None:
            await index.close()
    _print(
        {
            "team_version": result.team.version,
            "episodes": len(result.audit),
            "commits": sum(e.committed for e in result.audit),
            "audit": str(spec.out / "audit.jsonl"),
        }
    )
    return 0


async def cmd_evaluate(args: argparse.Namespace) -> int:
    spec = _spec(args)
    team = load_team(spec.team)
    excluded = [t.id for t in load_tasks(args.exclude_tasks)] if args.exclude_tasks else []
    clock = _clock(args)
    gateway = _gateway(spec.backend, clock)
    try:
        report = await evaluate_team(
            team,
            load_tasks(spec.tasks),
            gateway,
            _evaluator(args),
            spec.budget,
            clock,
            exclude_task_ids=excluded,
            out_dir=spec.out,
        )
    finally:
        await _close(gateway)
    _print(report.model_dump(mode="json"))
    return 0


async def cmd_attribute(args: argparse.Namespace) -> int:
    traces = [import_annotated(p) for p in args.traces]
    cfg = SchemeConfig(alpha=args.alpha, rounds=args.rounds, verdict_source=args.verdict_source)
    if args.model:
        cfg = cfg.model_copy(update={"model": args.model})
    clock = _clock(args)
    gateway = _gateway(args.backend, clock)
    try:
        run = await attribute_many(traces, args.scheme, gateway, cfg, repeats=args.repeats)
    finally:
        await _close(gateway)
    _print(
        {
            "verdicts": [
                [
                    {
                        "trace": t.trace_id,
                        "agent": v.mistake_agent,
                        "step": v.mistake_step,
                        "fallback": v.fallback,
                    }
                    for t, v in zip(traces, verdicts, strict=True)
                ]
                for verdicts in run.verdicts
            ],
            "report": run.report.model_dump(mode="json"),
        }
    )
    return 0


def timeline(experience: Experience, agent: str | None = None) -> list[str]:
    """One line per event, indented into a lane per actor."""
    lanes = {name: i for i, name in enumerate(experience.trajectory.agents)}
    lines = [
        f"episode {experience.episode_id} (team v{experience.team_version}, "
        f"task {experience.task.id})"
    ]
    for event in experience.trajectory.events:
        if agent is not None and not event.involves(agent):
            continue
        indent = "    " * (lanes.get(event.actor, -1) + 1)
        target = f" -> {event.recipient}" if event.recipient else ""
        body = json.dumps(event.payload, sort_keys=True, ensure_ascii=False)
        if len(body) > 160:
            body = body[:157] + "..."
        cost = f" ${event.cost}" if event.cost else ""
        lines.append(
            f"{event.seq:>5} {indent}{event.actor}{target} [{event.kind.value}]{cost} {body}"
        )
    o = experience.outcome
    lines.append(
        f"outcome: passed={o.passed} score={o.score} reason={o.reason.value} "
        f"finalized_by={o.finalized_by} cost=${experience.total_cost}"
    )
    return lines


async def cmd_inspect(args: argparse.Namespace) -> int:
    experience = load_experience(args.trace)
    print("\n".join(timeline(experience, args.agent)))
    return 0


async def cmd_replay(args: argparse.Namespace) -> int:
    """Re-run a scripted episode under the fixed clock and diff it against the file."""
    recorded = load_experience(args.trace)
    clock = FakeClock()
    gateway = ScriptedGateway(load_script(args.script), clock)
    replayed = await run_task(
        load_team(args.team),
        recorded.task,
        _budget(args),
        gateway,
        _evaluator(args),
        clock,
        episode_id=recorded.episode_id,
        retry_of=recorded.retry_of,
    )
    before = serialize(recorded).decode("utf-8").splitlines()
    after = serialize(replayed).decode("utf-8").splitlines()
    diff = list(difflib.unified_diff(before, after, "recorded", "replayed", lineterm=""))
    if diff:
        print("\n".join(diff))
        return REPLAY_DIVERGED
    print(f"replay of {recorded.episode_id} matches ({len(before)} records)")
    return 0


async def cmd_validate_scaffold(args: argparse.Namespace) -> int:
    report = check_scaffold(args.team)
    _print(report.model_dump(mode="json"))
    if not report.accepted:
        raise GateRejected(report.failed)
    return 0


async def cmd_init_team(args: argparse.Namespace) -> int:
    team = write_template(args.path, args.template, args.name, args.backbone)
    print(f"created {team.name} at {args.path} (entry {team.entry_agent}, {len(team.pool)} agents)")
    return 0


# Parser


def _add_budget(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--budget", default="swe-pro", help="budget profile (default: swe-pro)")
    parser.add_argument("--max-seconds", type=float, help="override the profile's time limit")
    parser.add_argument("--max-messages", type=int, help="override the profile's message limit")
    parser.add_argument("--max-cost", help="override the profile's cost limit (USD)")


def _add_backend(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend", default="wire", help="'wire' (default) or 'scripted:<script.yaml>'"
    )


def _add_evaluator(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--eval-command",
        help="external evaluator command; default compares with the task's expected answer",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metateam",
        description="Run, evolve and audit open-roster agent teams.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument(
        "--fixed-clock", action="store_true", help="deterministic clock for reproducible traces"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode and write its experience file")
    p.add_argument("--team", type=Path, required=True)
    p.add_argument("--task", type=Path, required=True, help="task file (YAML/JSON)")
    p.add_argument("--out", type=Path, default=config.DATA_DIR / "experiences")
    _add_budget(p)
    _add_backend(p)
    _add_evaluator(p)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("evolve", help="run an evolution curriculum over a task list")
    p.add_argument("--team", type=Path, required=True)
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--out", type=Path, default=config.DATA_DIR / "evolution")
    p.add_argument("--resume", action="store_true", help="skip episodes already in the audit")
    p.add_argument("--scales", default="l1,l2,l3", help="comma-separated subset of l1,l2,l3")
    p.add_argument("--exchange", choices=["collaborative", "partitioned"], default="collaborative")
    p.add_argument("--evolution-budget-scale", type=float, default=1.0)
    p.add_argument("--index", help="SQLAlchemy URL of an experience index to update")
    _add_budget(p)
    _add_backend(p)
    _add_evaluator(p)
    p.set_defaults(handler=cmd_evolve)

    p = sub.add_parser("evaluate", help="evaluate a frozen team on held-out tasks")
    p.add_argument("--team", type=Path, required=True)
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--exclude-tasks", type=Path, help="evolution task file; ids must not overlap")
    p.add_argument("--out", type=Path, default=config.DATA_DIR / "evaluation")
    _add_budget(p)
    _add_backend(p)
    _add_evaluator(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("attribute", help="attribute failures in annotated traces")
    p.add_argument("traces", nargs="+", type=Path)
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="collab")
    p.add_argument("--alpha", type=float, default=config.ATTRIBUTION_ALPHA)
    p.add_argument("--rounds", type=int, default=config.ATTRIBUTION_ROUNDS)
    p.add_argument("--repeats", type=int, default=1, help="average accuracy over k repeats")
    p.add_argument("--verdict-source", choices=["consensus", "global"], default="consensus")
    p.add_argument("--model", help="analyzer model")
    _add_backend(p)
    p.set_defaults(handler=cmd_attribute)

    p = sub.add_parser("inspect", help="print an experience as a timeline")
    p.add_argument("trace", type=Path)
    p.add_argument("--agent", help="only this agent's local trace")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("replay", help="re-run a scripted episode and diff the traces")
    p.add_argument("trace", type=Path)
    p.add_argument("--team", type=Path, required=True)
    p.add_argument("--script", type=Path, required=True)
    _add_budget(p)
    _add_evaluator(p)
    p.set_defaults(handler=cmd_replay)

    p = sub.add_parser("validate-scaffold", help="run the commit-gate checks on a team")
    p.add_argument("team", type=Path)
    p.set_defaults(handler=cmd_validate_scaffold)

    p = sub.add_parser("init-team", help="write a starting team from a template")
    p.add_argument("path", type=Path)
    p.add_argument("--template", choices=sorted(TEMPLATES), default="swe")
    p.add_argument("--name")
    p.add_argument("--backbone")
    p.set_defaults(handler=cmd_init_team)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return asyncio.run(args.handler(args))
    except MetaTeamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (ValueError, OSError) as e:
        logger.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
