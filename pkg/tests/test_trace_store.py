import json
from datetime import datetime, timezone
from decimal import Decimal

import pytest
from pydantic import ValidationError

from src.errors import ImmutableExperience, SchemaError, UnknownAgent
from src.trace_store import (
    annotate_experience,
    export_experience,
    freeze,
    import_annotated,
    load_experience,
    local_trace,
    serialize,
    step_records,
)
from src.types import BusEvent, EndReason, EventKind, Task, TaskOutcome

TS = datetime(2026, 1, 1, tzinfo=timezone.utc)
TASK = Task(id="t1", input="What is six times seven?", expected="42")


def ev(seq, kind, actor, recipient=None, cost="0", **payload) -> BusEvent:
    return BusEvent(
        seq=seq,
        ts=TS,
        kind=kind,
        actor=actor,
        recipient=recipient,
        payload=payload,
        cost=Decimal(cost),
    )


def two_agent_events() -> list[BusEvent]:
    start = {"id": "c1", "name": "start_agent", "arguments": {"name": "developer", "brief": "go"}}
    final = {"id": "c2", "name": "finalize", "arguments": {"deliverable": "41"}}
    delegating = {"text": "delegating", "tool_calls": [start]}
    return [
        ev(0, EventKind.LIFECYCLE, "system", op="start", agent="planner"),
        ev(1, EventKind.MESSAGE, "system", "planner", body="brief"),
        ev(2, EventKind.MODEL_RESULT, "planner", cost="0.5", **delegating),
        ev(3, EventKind.LIFECYCLE, "planner", op="start", agent="developer"),
        ev(4, EventKind.MESSAGE, "planner", "developer", body="go"),
        ev(5, EventKind.TOOL_RESULT, "planner", name="start_agent", result="started developer"),
        ev(6, EventKind.MODEL_RESULT, "developer", cost="0.25", text="41", tool_calls=[]),
        ev(7, EventKind.MESSAGE, "developer", "planner", body="41"),
        ev(8, EventKind.MODEL_RESULT, "planner", text="", tool_calls=[final]),
        ev(9, EventKind.LIFECYCLE, "planner", op="finalize", agent="planner", deliverable="41"),
    ]


@pytest.fixture
def experience():
    outcome = TaskOutcome(deliverable="41", score=0.0, passed=False, finalized_by="planner")
    return freeze(two_agent_events(), TASK, outcome, episode_id="t1-v0")


def test_freeze_orders_and_collects_agents(experience):
    assert experience.trajectory.agents == ("planner", "developer")
    assert experience.total_cost == Decimal("0.75")
    events = two_agent_events()
    shuffled = freeze(list(reversed(events)), TASK, experience.outcome, episode_id="x")
    assert [e.seq for e in shuffled.trajectory.events] == list(range(10))


def test_freeze_rejects_gaps(experience):
    events = [e for e in two_agent_events() if e.seq != 4]
    with pytest.raises(SchemaError):
        freeze(events, TASK, experience.outcome, episode_id="gap")


def test_local_trace_projection(experience):
    developer = local_trace(experience.trajectory, "developer")
    assert [e.seq for e in developer.events] == [3, 4, 6, 7]
    planner = local_trace(experience.trajectory, "planner")
    assert 4 in [e.seq for e in planner.events]
    assert 7 in [e.seq for e in planner.events]
    with pytest.raises(UnknownAgent):
        local_trace(experience.trajectory, "reviewer")


def test_step_records(experience):
    steps = step_records(experience.trajectory)
    assert [(s.index, s.agent) for s in steps] == [
        (1, "planner"),
        (2, "developer"),
        (3, "planner"),
    ]
    assert steps[0].input == "[message from system] brief"
    assert steps[0].output.startswith("delegating\nstart_agent(")
    assert steps[1].input == "[message from planner] go"
    assert steps[2].input.splitlines() == [
        '[start_agent result] {"result":"started developer"}',
        "[message from developer] 41",
    ]
    assert steps[2].output == 'finalize({"deliverable":"41"})'


def test_export_load_is_byte_stable(experience, tmp_path):
    path = export_experience(experience, tmp_path / "t1-v0.jsonl")
    loaded = load_experience(path)
    assert loaded == experience
    assert serialize(loaded) == path.read_bytes()
    with pytest.raises(ImmutableExperience):
        export_experience(experience, path)


def test_truncated_file_is_a_schema_error(experience, tmp_path):
    lines = serialize(experience).decode("utf-8").splitlines()
    path = tmp_path / "cut.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_experience(path)
    assert err.value.field == "outcome"


def test_bad_records_report_line_and_field(experience, tmp_path):
    lines = serialize(experience).decode("utf-8").splitlines()

    broken = list(lines)
    broken[2] = "{not json"
    path = tmp_path / "broken.jsonl"
    path.write_text("\n".join(broken), encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_experience(path)
    assert err.value.line == 3

    header = json.loads(lines[0])
    header["format_version"] = 9
    path = tmp_path / "future.jsonl"
    path.write_text("\n".join([json.dumps(header), *lines[1:]]), encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_experience(path)
    assert err.value.field == "format_version"

    event = json.loads(lines[3])
    event["kind"] = "telepathy"
    path = tmp_path / "kind.jsonl"
    path.write_text("\n".join([*lines[:3], json.dumps(event), *lines[4:]]), encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_experience(path)
    assert err.value.line == 4
    assert err.value.field == "kind"

    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_experience(empty)


def test_format_one_files_load_with_defaults(tmp_path):
    def event(seq, kind, actor, **extra):
        ts = "2026-01-01T00:00:00+00:00"
        return {"seq": seq, "ts": ts, "kind": kind, "actor": actor, **extra}

    records = [
        {"format_version": 1, "episode_id": "old", "task": {"id": "t0", "input": "?"}},
        event(0, "lifecycle", "system", payload={"op": "start", "agent": "solver"}),
        event(1, "message", "system", recipient="solver", payload={"body": "go"}),
        event(2, "model_result", "solver", payload={"text": "hmm", "tool_calls": []}),
        event(3, "lifecycle", "system", payload={"op": "force_finalize", "reason": "cost"}),
        {"outcome": {"deliverable": "", "finalized_by": "system"}},
    ]
    path = tmp_path / "old.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    experience = load_experience(path)
    assert experience.episode_id == "old"
    assert experience.team_version == 0
    assert experience.outcome.reason is EndReason.COST
    assert experience.outcome.passed is False
    assert experience.total_cost == Decimal("0")


# Annotated traces


def write_jsonl(path, records) -> None:
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def test_import_annotated_jsonl(tmp_path):
    path = tmp_path / "who.jsonl"
    write_jsonl(
        path,
        [
            {"trace_id": "who-1", "mistake_agent": "coder", "mistake_step": 2},
            {"agent": "planner", "input": "task", "output": "plan"},
            {"agent": "coder", "input": "plan", "output": "wrong code"},
            {"agent": "planner", "input": "wrong code", "output": "done"},
        ],
    )
    trace = import_annotated(path)
    assert trace.trace_id == "who-1"
    assert trace.agents == ["planner", "coder"]
    assert (trace.mistake_agent, trace.mistake_step) == ("coder", 2)
    assert trace.bucket == "<=128K"


def test_import_annotated_json_zero_based(tmp_path):
    path = tmp_path / "hand.json"
    path.write_text(
        json.dumps(
            {
                "mistake_agent": "B",
                "mistake_step": 1,
                "step_base": 0,
                "history": [
                    {"name": "A", "content": "x"},
                    {"name": "B", "content": "y" * 600_000},
                ],
            }
        ),
        encoding="utf-8",
    )
    trace = import_annotated(path)
    assert trace.trace_id == "hand"
    assert (trace.mistake_agent, trace.mistake_step) == ("B", 2)
    assert trace.bucket == ">128K"


def test_import_annotated_errors(tmp_path):
    path = tmp_path / "no-truth.jsonl"
    write_jsonl(path, [{"trace_id": "x"}, {"agent": "a", "output": "o"}])
    with pytest.raises(SchemaError) as err:
        import_annotated(path)
    assert err.value.field == "mistake_agent"

    path = tmp_path / "beyond.jsonl"
    write_jsonl(path, [{"mistake_agent": "a", "mistake_step": 5}, {"agent": "a", "output": "o"}])
    with pytest.raises(SchemaError) as err:
        import_annotated(path)
    assert err.value.field == "mistake_step"

    path = tmp_path / "anonymous.jsonl"
    write_jsonl(path, [{"mistake_agent": "a", "mistake_step": 1}, {"output": "o"}])
    with pytest.raises(SchemaError) as err:
        import_annotated(path)
    assert (err.value.line, err.value.field) == (2, "agent")


def test_annotate_experience(experience):
    trace = annotate_experience(experience, "developer", 2)
    assert trace.trace_id == "t1-v0"
    assert len(trace.steps) == 3
    assert trace.steps[1].agent == "developer"


def test_frozen_experience_rejects_nested_edits(experience):
    with pytest.raises(ValidationError):
        experience.task.input = "tampered"
    with pytest.raises(ValidationError):
        experience.outcome.deliverable = "42"

    result = experience.trajectory.events[2]
    with pytest.raises(TypeError):
        result.payload["text"] = "tampered"
    with pytest.raises(TypeError):
        result.payload.update(text="tampered")
    with pytest.raises(TypeError):
        result.payload["tool_calls"][0]["arguments"]["name"] = "reviewer"
    with pytest.raises(AttributeError):
        result.payload["tool_calls"].append({})
    assert step_records(experience.trajectory)[0].output.startswith("delegating\nstart_agent(")


def test_local_traces_rebuild_the_trajectory(experience):
    trajectory = experience.trajectory
    merged = {
        e.seq: e
        for agent in trajectory.agents
        for e in local_trace(trajectory, agent).events
    }
    assert [merged[seq] for seq in sorted(merged)] == list(trajectory.events)


def test_import_annotated_json_rejects_non_object_steps(tmp_path):
    path = tmp_path / "odd.json"
    path.write_text(
        json.dumps(
            {
                "mistake_agent": "A",
                "mistake_step": 1,
                "steps": [{"agent": "A", "output": "x"}, "not a step"],
            }
        ),
        encoding="utf-8",
    )
    with pytest.raises(SchemaError) as err:
        import_annotated(path)
    assert err.value.field == "steps[2]"
