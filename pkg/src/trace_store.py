"""Frozen experiences, local traces and annotated-trace import.

Experience file layout (UTF-8, one JSON record per line)::

    {"format_version": 2, "episode_id": ..., "team_version": ..., "task": {...},
     "agents": [...], "retry_of": null}                      header
    {"seq": 0, "ts": ..., "kind": ..., "actor": ..., "recipient": ...,
     "payload": {...}, "cost": "0"}                            one line per event
    {"outcome": {...}}                                         last line

Files are written once; writing over an existing file is refused.
"""

import json
import logging
import os
from collections.abc import Iterable
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from . import config
from .errors import ImmutableExperience, SchemaError, UnknownAgent
from .types import (
    SYSTEM_ACTOR,
    AnnotatedTrace,
    BusEvent,
    EndReason,
    EventKind,
    Experience,
    LocalTrace,
    StepRecord,
    Task,
    TaskOutcome,
    Trajectory,
)

logger = logging.getLogger(__name__)


def _dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def participants(events: Iterable[BusEvent]) -> tuple[str, ...]:
    """Non-system actors in order of first appearance."""
    return tuple(dict.fromkeys(e.actor for e in events if e.actor != SYSTEM_ACTOR))


def freeze(
    events: Iterable[BusEvent],
    task: Task,
    outcome: TaskOutcome,
    episode_id: str,
    team_version: int = 0,
    retry_of: str | None = None,
) -> Experience:
    """Build the immutable experience of an ended episode."""
    ordered = tuple(sorted(events, key=lambda e: e.seq))
    if [e.seq for e in ordered] != list(range(len(ordered))):
        raise SchemaError("event sequence numbers are not gap-free from 0")
    trajectory = Trajectory(events=ordered, agents=participants(ordered))
    return Experience(
        episode_id=episode_id,
        team_version=team_version,
        task=task,
        trajectory=trajectory,
        outcome=outcome,
        retry_of=retry_of,
    )


def local_trace(trajectory: Trajectory, agent: str) -> LocalTrace:
    """Order-preserving projection of ``trajectory`` onto ``agent``.

    A message appears in both its sender's and its recipient's trace.
    """
    if agent not in trajectory.agents:
        raise UnknownAgent(agent)
    return LocalTrace(agent=agent, events=tuple(e for e in trajectory.events if e.involves(agent)))


def _render_call(call: dict[str, Any]) -> str:
    return f"{call['name']}({_dumps(call.get('arguments', {}))})"


def step_records(trajectory: Trajectory) -> list[StepRecord]:
    """One record per model step, numbered globally from 1.

    The input of a step is what reached the agent since its previous step
    (messages and tool results); the output is the reply text plus its tool
    calls.
    """
    pending: dict[str, list[str]] = {}
    steps: list[StepRecord] = []
    for event in trajectory.events:
        if event.kind is EventKind.MESSAGE and event.recipient:
            pending.setdefault(event.recipient, []).append(
                f"[message from {event.actor}] {event.payload.get('body', '')}"
            )
        elif event.kind is EventKind.TOOL_RESULT:
            result = {k: v for k, v in event.payload.items() if k in ("result", "error")}
            pending.setdefault(event.actor, []).append(
                f"[{event.payload.get('name')} result] {_dumps(result)}"
            )
        elif event.kind is EventKind.MODEL_RESULT:
            calls = [_render_call(c) for c in event.payload.get("tool_calls", [])]
            output = "\n".join([event.payload.get("text", ""), *calls]).strip()
            steps.append(
                StepRecord(
                    index=len(steps) + 1,
                    agent=event.actor,
                    input="\n".join(pending.pop(event.actor, [])),
                    output=output,
                )
            )
    return steps


# Experience files


def experience_lines(experience: Experience) -> list[str]:
    header = {
        "format_version": config.TRACE_FORMAT_VERSION,
        "episode_id": experience.episode_id,
        "team_version": experience.team_version,
        "task": experience.task.model_dump(mode="json"),
        "agents": list(experience.trajectory.agents),
        "retry_of": experience.retry_of,
    }
    lines = [_dumps(header)]
    lines.extend(_dumps(e.to_record()) for e in experience.trajectory.events)
    lines.append(_dumps({"outcome": experience.outcome.model_dump(mode="json")}))
    return lines


def serialize(experience: Experience) -> bytes:
    return ("\n".join(experience_lines(experience)) + "\n").encode("utf-8")


def export_experience(experience: Experience, path: str | Path) -> Path:
    """Write ``experience`` to ``path`` exactly once."""
    path = Path(path)
    if path.exists():
        raise ImmutableExperience(f"{path} already holds a frozen experience")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(serialize(experience))
    os.replace(tmp, path)
    logger.debug(f"Exported {experience.episode_id} to {path}")
    return path


def _legacy_reason(events: list[BusEvent], finalized_by: str) -> str:
    """End reason for format-1 files, recovered from lifecycle events."""
    for event in reversed(events):
        if event.kind is not EventKind.LIFECYCLE:
            continue
        op = event.payload.get("op")
        if op == "force_finalize":
            return event.payload.get("reason", EndReason.SECONDS.value)
        if op == "terminate":
            return EndReason.TERMINATE.value
    return EndReason.FINALIZE.value if finalized_by != SYSTEM_ACTOR else EndReason.SECONDS.value


def load_experience(path: str | Path) -> Experience:
    """Read an experience file; format-1 files load with defaulted fields."""
    path = Path(path)
    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot read {path}: {e}") from e
    records: list[tuple[int, dict[str, Any]]] = []
    for number, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON ({e.msg})", line=number) from e
        if not isinstance(record, dict):
            raise SchemaError("record is not an object", line=number)
        records.append((number, record))
    if not records:
        raise SchemaError(f"{path} is empty")

    header_line, header = records[0]
    version = header.get("format_version")
    if version not in (1, config.TRACE_FORMAT_VERSION):
        raise SchemaError(f"unsupported format_version {version!r}", header_line, "format_version")
    last_line, last = records[-1]
    if "outcome" not in last or len(records) < 2:
        raise SchemaError("missing outcome record (file truncated?)", last_line, "outcome")

    events: list[BusEvent] = []
    for number, record in records[1:-1]:
        if version == 1:
            record = {"cost": "0", **record}
        try:
            events.append(BusEvent.model_validate(record))
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first["loc"]) or None
            raise SchemaError(first["msg"], number, field) from e

    try:
        task = Task.model_validate(header["task"])
        outcome_data = dict(last["outcome"])
        if version == 1:
            outcome_data.setdefault(
                "reason", _legacy_reason(events, outcome_data.get("finalized_by", ""))
            )
            outcome_data.setdefault("passed", False)
        outcome = TaskOutcome.model_validate(outcome_data)
    except KeyError as e:
        raise SchemaError("missing field", header_line, str(e.args[0])) from e
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or None
        raise SchemaError(first["msg"], last_line, field) from e

    try:
        return freeze(
            events,
            task,
            outcome,
            episode_id=header.get("episode_id") or path.stem,
            team_version=header.get("team_version", 0),
            retry_of=header.get("retry_of"),
        )
    except ValidationError as e:
        raise SchemaError(f"inconsistent trajectory: {e.errors()[0]['msg']}") from e


# Annotated traces


def _step_from(record: Any, line: int | None, index: int) -> StepRecord:
    if not isinstance(record, dict):
        raise SchemaError("step record is not an object", line, f"steps[{index}]")
    agent = record.get("agent", record.get("name"))
    output = record.get("output", record.get("content"))
    if not isinstance(agent, str) or not agent:
        raise SchemaError("step record needs an agent name", line, "agent")
    if output is None:
        raise SchemaError("step record needs an output", line, "output")
    return StepRecord(
        index=index, agent=agent, input=str(record.get("input", "")), output=str(output)
    )


def _estimate_tokens(steps: list[StepRecord]) -> int:
    chars = sum(len(s.agent) + len(s.input) + len(s.output) for s in steps)
    return chars // config.CHARS_PER_TOKEN


def _annotated(
    trace_id: str, steps: list[StepRecord], header: dict[str, Any], line: int | None
) -> AnnotatedTrace:
    for key in ("mistake_agent", "mistake_step"):
        if key not in header:
            raise SchemaError("missing ground truth", line, key)
    try:
        step = int(header["mistake_step"]) + 1 - int(header.get("step_base", 1))
    except (TypeError, ValueError) as e:
        raise SchemaError("mistake_step is not an integer", line, "mistake_step") from e
    try:
        return AnnotatedTrace(
            trace_id=str(header.get("trace_id") or trace_id),
            steps=steps,
            mistake_agent=header["mistake_agent"],
            mistake_step=step,
            token_estimate=_estimate_tokens(steps),
        )
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "mistake_step"
        raise SchemaError(first["msg"], line, field) from e


def import_annotated(path: str | Path) -> AnnotatedTrace:
    """Read an annotated multi-agent trace.

    ``.jsonl``: a header ``{mistake_agent, mistake_step}`` then one
    ``{agent, input, output}`` record per line. ``.json``: one object with the
    ground truth and a ``steps`` (or ``history``) list; ``name``/``content``
    are accepted for ``agent``/``output``, and ``step_base: 0`` marks a
    zero-based ``mistake_step``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot read {path}: {e}") from e

    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON ({e.msg})", e.lineno) from e
        records = data.get("steps", data.get("history")) if isinstance(data, dict) else None
        if not isinstance(records, list) or not records:
            raise SchemaError("no step records", None, "steps")
        steps = [_step_from(r, None, i) for i, r in enumerate(records, start=1)]
        return _annotated(path.stem, steps, data, None)

    header: dict[str, Any] | None = None
    header_line = 1
    steps = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON ({e.msg})", number) from e
        if not isinstance(record, dict):
            raise SchemaError("record is not an object", number)
        if header is None:
            header, header_line = record, number
            continue
        steps.append(_step_from(record, number, len(steps) + 1))
    if header is None or not steps:
        raise SchemaError("no step records", None, "steps")
    return _annotated(path.stem, steps, header, header_line)


def annotate_experience(
    experience: Experience, mistake_agent: str, mistake_step: int
) -> AnnotatedTrace:
    """Turn a native experience into an annotated trace for attribution runs."""
    steps = step_records(experience.trajectory)
    if not steps:
        raise SchemaError("experience has no model steps")
    return AnnotatedTrace(
        trace_id=experience.episode_id,
        steps=steps,
        mistake_agent=mistake_agent,
        mistake_step=mistake_step,
        token_estimate=_estimate_tokens(steps),
    )
