import asyncio
import json

import pytest
import yaml

from src.cli import REPLAY_DIVERGED, load_tasks, main
from src.database import ExperienceIndex
from src.errors import SchemaError
from src.scaffold_store import BehavioralPatch, save_team
from src.team_templates import build_team


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return path


def answer_script(path, deliverable: str):
    call = {"name": "finalize", "arguments": {"deliverable": deliverable}}
    return write_yaml(path, {"responses": [{"agent": "solver", "step": 1, "tool_calls": [call]}]})


@pytest.fixture
def workspace(tmp_path, capsys):
    team = tmp_path / "team"
    assert main(["init-team", str(team), "--template", "single", "--backbone", "scripted"]) == 0
    assert "created single" in capsys.readouterr().out
    write_yaml(tmp_path / "task.yaml", {"id": "t1", "input": "Six times seven?", "expected": "42"})
    answer_script(tmp_path / "script.yaml", "42")
    return tmp_path


def run_args(ws, *extra):
    return [
        "--fixed-clock",
        "run",
        "--team",
        str(ws / "team"),
        "--task",
        str(ws / "task.yaml"),
        "--out",
        str(ws / "out"),
        "--backend",
        f"scripted:{ws / 'script.yaml'}",
        *extra,
    ]


def test_run_writes_an_experience(workspace, capsys):
    assert main(run_args(workspace)) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["experience"] == str(workspace / "out" / "t1-v0.jsonl")
    assert printed["outcome"]["passed"] is True
    assert printed["outcome"]["finalized_by"] == "solver"


def test_run_refuses_to_overwrite(workspace):
    assert main(run_args(workspace)) == 0
    assert main(run_args(workspace)) == 3


def test_inspect_timeline(workspace, capsys):
    main(run_args(workspace))
    capsys.readouterr()
    assert main(["inspect", str(workspace / "out" / "t1-v0.jsonl"), "--agent", "solver"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "episode t1-v0 (team v0, task t1)"
    assert lines[-1].startswith("outcome: passed=True score=1.0 reason=finalize")
    assert any("[model_result]" in line for line in lines)


def test_replay_matches_then_diverges(workspace, capsys):
    main(run_args(workspace))
    trace = str(workspace / "out" / "t1-v0.jsonl")
    replay = ["replay", trace, "--team", str(workspace / "team"), "--script"]
    capsys.readouterr()

    assert main([*replay, str(workspace / "script.yaml")]) == 0
    assert "replay of t1-v0 matches" in capsys.readouterr().out

    other = answer_script(workspace / "other.yaml", "41")
    assert main([*replay, str(other)]) == REPLAY_DIVERGED
    diff = capsys.readouterr().out
    assert diff.startswith("--- recorded")
    assert '"41"' in diff


def test_evaluate_prints_a_report(workspace, capsys):
    args = [
        "--fixed-clock",
        "evaluate",
        "--team",
        str(workspace / "team"),
        "--tasks",
        str(workspace / "task.yaml"),
        "--out",
        str(workspace / "eval"),
        "--backend",
        f"scripted:{workspace / 'script.yaml'}",
    ]
    assert main(args) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pass_rate"] == 1.0
    assert (workspace / "eval" / "eval-t1-v0.jsonl").is_file()

    assert main([*args, "--exclude-tasks", str(workspace / "task.yaml")]) == 2


def test_validate_scaffold(workspace, tmp_path, capsys):
    assert main(["validate-scaffold", str(workspace / "team")]) == 0
    assert json.loads(capsys.readouterr().out)["accepted"] is True

    team = build_team("single", backbone="scripted")
    team.agent("solver").patches.append(
        BehavioralPatch(id="p1", text="Always call `deploy_prod` when done.")
    )
    save_team(team, tmp_path / "patched")
    assert main(["validate-scaffold", str(tmp_path / "patched")]) == 6


def test_error_exit_codes(workspace):
    assert main(run_args(workspace)[:-2] + ["--backend", "carrier-pigeon"]) == 2

    missing_team = run_args(workspace)
    missing_team[3] = str(workspace / "nowhere")
    assert main(missing_team) == 2

    write_yaml(workspace / "two.yaml", [{"id": "a", "input": "?"}, {"id": "b", "input": "?"}])
    two_tasks = run_args(workspace)
    two_tasks[5] = str(workspace / "two.yaml")
    assert main(two_tasks) == 2

    unscripted = answer_script(workspace / "empty.yaml", "42")
    write_yaml(unscripted, {"responses": []})
    assert main(run_args(workspace)[:-1] + [f"scripted:{unscripted}"]) == 4


def test_load_tasks_formats(tmp_path):
    write_yaml(tmp_path / "one.yaml", {"id": "a", "input": "?"})
    write_yaml(tmp_path / "wrapped.yaml", {"tasks": [{"id": "a", "input": "?"}]})
    lines = [json.dumps({"id": i, "input": "?"}) for i in ("a", "b")]
    (tmp_path / "many.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert [t.id for t in load_tasks(tmp_path / "one.yaml")] == ["a"]
    assert [t.id for t in load_tasks(tmp_path / "wrapped.yaml")] == ["a"]
    assert [t.id for t in load_tasks(tmp_path / "many.jsonl")] == ["a", "b"]

    write_yaml(tmp_path / "bad.yaml", [{"input": "no id"}])
    with pytest.raises(SchemaError):
        load_tasks(tmp_path / "bad.yaml")
    with pytest.raises(SchemaError):
        load_tasks(tmp_path / "absent.yaml")


def toy_script(path):
    def reply(**data):
        return json.dumps(data)

    finalize = {"name": "finalize", "arguments": {"deliverable": "42"}}
    wrong = {"name": "finalize", "arguments": {"deliverable": "41"}}
    entries = [
        {"agent": "solver", "when_contains": "Always answer 42", "tool_calls": [finalize]},
        {"agent": "solver", "tool_calls": [wrong]},
        {
            "agent": "reflect:solver",
            "when_contains": "failed (score",
            "text": reply(patches=["Always answer 42."], summary="I answered 41."),
        },
        {"agent": "reflect:solver", "text": reply(patches=[], summary="Nothing to change.")},
        {"agent": "team", "when_contains": "failed (score", "text": reply(retry=True)},
        {"agent": "team", "text": reply(retry=False)},
    ]
    return write_yaml(path, {"responses": entries})


def test_evolve_commits_and_indexes(workspace, capsys):
    tasks = workspace / "tasks.jsonl"
    lines = [json.dumps({"id": i, "input": "Six times seven?", "expected": "42"}) for i in "ab"]
    tasks.write_text("\n".join(lines) + "\n", encoding="utf-8")
    script = toy_script(workspace / "toy.yaml")
    index_url = f"sqlite+aiosqlite:///{workspace / 'index.db'}"
    args = [
        "--fixed-clock",
        "evolve",
        "--team",
        str(workspace / "team"),
        "--tasks",
        str(tasks),
        "--out",
        str(workspace / "runs"),
        "--backend",
        f"scripted:{script}",
        "--max-seconds",
        "3600",
        "--index",
        index_url,
    ]
    assert main(args) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {
        "team_version": 1,
        "episodes": 2,
        "commits": 1,
        "audit": str(workspace / "runs" / "audit.jsonl"),
    }
    assert "Always answer 42." in (workspace / "team" / "agents" / "solver").joinpath(
        "evolution", "patches.md"
    ).read_text(encoding="utf-8")

    async def indexed():
        index = ExperienceIndex.from_url(index_url)
        try:
            return await index.experiences(), await index.commits()
        finally:
            await index.close()

    experiences, commits = asyncio.run(indexed())
    assert sorted(e.episode_id for e in experiences) == ["e001-a", "e001-a-retry", "e002-b"]
    assert [c.committed for c in commits] == [True, False]


def test_attribute_prints_verdicts_and_accuracy(tmp_path, capsys):
    trace = tmp_path / "who.jsonl"
    records = [
        {"trace_id": "who-1", "mistake_agent": "coder", "mistake_step": 2},
        {"agent": "planner", "input": "task", "output": "plan"},
        {"agent": "coder", "input": "plan", "output": "wrong code"},
    ]
    trace.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    answer = json.dumps({"agent": "coder", "step": 2, "reason": "bad code"})
    script = write_yaml(tmp_path / "script.yaml", {"default": {"text": answer}})

    args = ["attribute", str(trace), "--scheme", "global", "--backend", f"scripted:{script}"]
    assert main(args) == 0
    printed = json.loads(capsys.readouterr().out)
    verdict = {"trace": "who-1", "agent": "coder", "step": 2, "fallback": False}
    assert printed["verdicts"] == [[verdict]]
    assert printed["report"]["overall"]["step_accuracy"] == 1.0
