import random
import shutil
from pathlib import Path

import pytest

from src.errors import (
    DuplicateAgentName,
    MalformedAgentDir,
    MissingManifest,
    PersistFailure,
    ScaffoldFormatError,
    UnknownSkill,
)
from src.scaffold_store import (
    AgentScaffold,
    BehavioralPatch,
    ScaffoldStore,
    Skill,
    TeammateProfile,
    apply_update,
    load_skill,
    load_team,
    merge_update,
    parse_patches,
    parse_skill,
    render_skill,
    render_system_prompt,
    save_team,
    team_files,
)
from src.team_templates import build_team
from src.updates import EvolutionUpdate, L1Entry, L2Entry, L3Revision, NewAgent, SkillEdit


def tree(root: Path) -> dict[str, bytes]:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def skill_edit(name: str, body: str = "Step one.\nStep two.\n", tools=()) -> SkillEdit:
    skill = Skill(name=name, description=f"How to {name}", body=body, tools=list(tools))
    return SkillEdit(name=name, content=render_skill(skill))


def test_template_round_trip(team_root):
    root = team_root("swe")
    team = load_team(root)
    assert team.names == ["planner", "developer", "reviewer"]
    assert team.entry_agent == "planner"
    assert team.version == 0
    assert team.agent("developer").role_header == "Developer"
    assert team_files(team) == tree(root)


def test_hand_formatting_survives_round_trip(team_root):
    root = team_root("swe")
    cfg = root / "agents" / "planner" / "config.yaml"
    cfg.write_text(
        "# tuned by hand\ntemperature: 0.2\nbackbone: scripted\nallowed_tools: []\n"
        "max_output_tokens: 32768\n",
        encoding="utf-8",
    )
    (root / "agents" / "planner" / "NOTES.txt").write_bytes(b"keep me\n")
    team = load_team(root)
    files = team_files(team)
    assert files["agents/planner/config.yaml"] == cfg.read_bytes()
    assert files["agents/planner/NOTES.txt"] == b"keep me\n"


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        load_team(tmp_path / "nowhere")
    (tmp_path / "team").mkdir()
    (tmp_path / "team" / "constitution.md").write_text("Be kind.\n", encoding="utf-8")
    with pytest.raises(MissingManifest):
        load_team(tmp_path / "team")


def test_missing_prompt_is_malformed_agent_dir(team_root):
    root = team_root("swe")
    (root / "agents" / "reviewer" / "prompt.md").unlink()
    with pytest.raises(MalformedAgentDir) as err:
        load_team(root)
    assert err.value.name == "reviewer"
    assert err.value.exit_code == 2


def test_duplicate_pool_name(team_root):
    root = team_root("swe")
    manifest = root / "team.yaml"
    text = manifest.read_text(encoding="utf-8")
    manifest.write_text(text.replace("- reviewer", "- reviewer\n- planner"), encoding="utf-8")
    with pytest.raises(DuplicateAgentName):
        load_team(root)


def test_broken_skill_reports_file_and_line(team_root):
    root = team_root("swe")
    skill_dir = root / "agents" / "planner" / "skills" / "triage"
    skill_dir.mkdir(parents=True)
    (skill_dir / "SKILL.md").write_text("name: triage\nno front matter\n", encoding="utf-8")
    with pytest.raises(MalformedAgentDir) as err:
        load_team(root)
    assert "agents/planner/skills/triage/SKILL.md:1" in str(err.value)


def test_skill_name_must_match_directory(team_root):
    root = team_root("swe")
    skill_dir = root / "agents" / "planner" / "skills" / "triage"
    skill_dir.mkdir(parents=True)
    skill = Skill(name="other", description="x", body="body")
    (skill_dir / "SKILL.md").write_text(render_skill(skill), encoding="utf-8")
    with pytest.raises(MalformedAgentDir):
        load_team(root)


def test_parse_patches_errors_carry_line_numbers():
    with pytest.raises(ScaffoldFormatError) as err:
        parse_patches("stray text\n<!-- patch id=a provenance=e1 -->\nDo it.\n")
    assert err.value.line == 1

    with pytest.raises(ScaffoldFormatError) as err:
        parse_patches("<!-- patch id=a provenance=e1 -->\n\n<!-- patch id=b provenance= -->\nOk\n")
    assert err.value.line == 3

    patches = parse_patches(
        "<!-- patch id=a provenance=e1 -->\nDo it.\n\n<!-- patch id=b provenance= -->\nAlso.\n"
    )
    assert [(p.id, p.text, p.provenance) for p in patches] == [
        ("a", "Do it.", "e1"),
        ("b", "Also.", ""),
    ]


def test_parse_skill_front_matter():
    with pytest.raises(ScaffoldFormatError) as err:
        parse_skill("---\nname: x\n---\nbody\n")
    assert err.value.line == 2
    with pytest.raises(ScaffoldFormatError):
        parse_skill("---\nname: x\ndescription: y\n")
    skill = parse_skill("---\nname: x\ndescription: y\ntools: [run_tests]\n---\nDo it.\n")
    assert skill.tools == ["run_tests"]
    assert skill.body == "Do it.\n"


def test_system_prompt_order_and_roster_filter():
    team = build_team("swe", backbone="scripted")
    planner = team.agent("planner")
    planner.patches = [BehavioralPatch(id="p1", text="Always write a plan first.")]
    planner.profiles = {
        "developer": TeammateProfile(subject="developer", text="Fast, needs exact paths."),
        "reviewer": TeammateProfile(subject="reviewer", text="Strict about tests."),
    }
    planner.skills = [Skill(name="triage", description="Sort issues", body="SECRET BODY")]
    prompt = render_system_prompt(planner, team, ["planner", "developer"])

    order = [
        "Team constitution",
        "Your role",
        "Behavioral patches",
        "Teammate profiles",
        "Skills",
        "Orchestration primitives",
    ]
    positions = [prompt.index(f"## {title}") for title in order]
    assert positions == sorted(positions)
    assert "Fast, needs exact paths." in prompt
    assert "Strict about tests." not in prompt
    assert "triage: Sort issues" in prompt
    assert "SECRET BODY" not in prompt


def test_load_skill_is_verbatim():
    agent = AgentScaffold(
        name="solver",
        role_prompt="# Solver\n",
        skills=[Skill(name="math", description="Arithmetic", body="  keep\n\nspacing  \n")],
    )
    assert load_skill(agent, "math") == "  keep\n\nspacing  \n"
    with pytest.raises(UnknownSkill):
        load_skill(agent, "chess")


def test_merge_update_applies_every_level():
    team = build_team("swe", backbone="scripted")
    update = EvolutionUpdate(
        episode_id="e001",
        l1={
            "developer": L1Entry(
                patches=[BehavioralPatch(id="e001-developer-1", text="Run the tests first.")],
                skills=[skill_edit("bisect")],
                summary="I skipped the tests.",
            )
        },
        l2=[
            L2Entry(
                pair=("developer", "planner"),
                profiles={"developer": "Gives precise plans.", "planner": "Needs file paths."},
            )
        ],
        l3=L3Revision(
            organization="planner -> developer -> tester -> reviewer",
            add_agents=[NewAgent(name="tester", role="Writes regression tests.")],
        ),
    )
    new = merge_update(team, update)
    assert team.version == 0
    assert new.version == 1
    assert new.names == ["planner", "developer", "reviewer", "tester"]
    developer = new.agent("developer")
    assert [p.text for p in developer.patches] == ["Run the tests first."]
    assert developer.skill("bisect").body == "Step one.\nStep two.\n"
    assert developer.profiles["planner"].text == "Gives precise plans."
    assert developer.profiles["planner"].last_updated == "e001"
    assert new.agent("planner").profiles["developer"].text == "Needs file paths."
    assert new.agent("tester").config.backbone == "scripted"
    assert "finalize" in new.agent("tester").config.allowed_tools
    assert new.organization.startswith("planner -> developer -> tester")


def test_merge_update_evicts_oldest_patches():
    team = build_team("single", backbone="scripted")
    update = EvolutionUpdate(
        episode_id="e1",
        l1={
            "solver": L1Entry(
                patches=[BehavioralPatch(id=f"p{i}", text=f"Rule {i}.") for i in range(1, 4)],
                summary="three rules",
            )
        },
    )
    new = merge_update(team, update, max_patches=2)
    assert [p.id for p in new.agent("solver").patches] == ["p2", "p3"]


def test_retired_agent_moves_to_retired_dir(team_root):
    root = team_root("swe")
    store = ScaffoldStore(root)
    update = EvolutionUpdate(
        episode_id="e002",
        l2=[L2Entry(pair=("planner", "reviewer"), notes={"planner": "Ask for a summary."})],
    )
    store.commit(update)
    store.commit(EvolutionUpdate(episode_id="e003", l3=L3Revision(remove_agents=["reviewer"])))
    team = store.snapshot()
    assert team.version == 2
    assert team.names == ["planner", "developer"]
    assert "reviewer" not in team.agent("planner").notes
    assert (root / "retired" / "reviewer" / "prompt.md").is_file()
    assert not (root / "agents" / "reviewer").exists()


def test_entry_agent_cannot_be_retired():
    team = build_team("swe", backbone="scripted")
    update = EvolutionUpdate(episode_id="e", l3=L3Revision(remove_agents=["planner"]))
    with pytest.raises(ValueError):
        merge_update(team, update)


def test_save_refuses_non_empty_directory(tmp_path):
    (tmp_path / "team").mkdir()
    (tmp_path / "team" / "x").write_text("x", encoding="utf-8")
    with pytest.raises(PersistFailure):
        save_team(build_team("single"), tmp_path / "team")


def test_apply_update_requires_root():
    team = build_team("single", backbone="scripted")
    with pytest.raises(PersistFailure):
        apply_update(team, EvolutionUpdate(episode_id="e"))


# Fault injection


class Crash(BaseException):
    """Simulated process death: not caught by the store's cleanup handler."""


def wide_update() -> EvolutionUpdate:
    agents = ["chairman", "worker-1", "worker-2", "worker-3"]
    return EvolutionUpdate(
        episode_id="e010",
        l1={
            name: L1Entry(
                patches=[BehavioralPatch(id=f"e010-{name}-1", text=f"{name} reports status.")],
                skills=[skill_edit(f"{name}-checklist")],
                summary=f"{name} was fine.",
            )
            for name in agents
        },
        l2=[
            L2Entry(
                pair=("chairman", worker),
                profiles={"chairman": f"{worker} is reliable.", worker: "Chairman is brief."},
                notes={"chairman": f"Ask {worker} for tests.", worker: "Report early."},
            )
            for worker in agents[1:]
        ],
    )


def fault_points(template_root: Path, tmp_path: Path) -> list[str]:
    root = tmp_path / "dry-run"
    shutil.copytree(template_root, root)
    seen: list[str] = []
    ScaffoldStore(root, fault=seen.append).commit(wide_update())
    return seen


@pytest.mark.parametrize("mode", ["error", "crash"])
def test_commit_is_atomic_at_every_fault_point(team_root, tmp_path, mode):
    pristine = team_root("orchestrator-workers", name="pristine")
    old = tree(pristine)

    reference = tmp_path / "reference"
    shutil.copytree(pristine, reference)
    ScaffoldStore(reference).commit(wide_update())
    new = tree(reference)
    assert new != old

    points = fault_points(pristine, tmp_path)
    assert len(points) * 2 >= 50
    assert points[-3:] == ["swap:begin", "swap:middle", "swap:end"]

    for i, point in enumerate(points):
        root = tmp_path / f"{mode}-{i}"
        shutil.copytree(pristine, root)

        def fault(label: str, point=point) -> None:
            if label == point:
                raise Crash(label) if mode == "crash" else OSError(f"disk full at {label}")

        store = ScaffoldStore(root, fault=fault)
        if mode == "crash":
            with pytest.raises(Crash):
                store.commit(wide_update())
        else:
            with pytest.raises(PersistFailure):
                store.commit(wide_update())

        team = ScaffoldStore(root).snapshot()
        after = tree(root)
        if point.startswith("write:") or point in ("swap:begin", "swap:middle"):
            assert after == old, point
            assert team.version == 0
        else:
            assert after == new, point
            assert team.version == 1
        assert not (tmp_path / f".{root.name}.staging").exists()
        assert not (tmp_path / f".{root.name}.backup").exists()


def test_reads_inside_the_swap_window_leave_the_commit_alone(team_root, tmp_path):
    root = team_root("orchestrator-workers")
    seen: list[tuple[str, int]] = []

    def read_during(label: str) -> None:
        if label.startswith("swap:"):
            seen.append((label, load_team(root).version))

    committed = ScaffoldStore(root, fault=read_during).commit(wide_update())
    assert committed.version == 1
    assert seen == [("swap:begin", 0), ("swap:middle", 0), ("swap:end", 1)]
    assert not (tmp_path / f".{root.name}.backup").exists()


def test_load_after_crash_is_read_only(team_root, tmp_path):
    root = team_root("orchestrator-workers")
    old = tree(root)

    def crash(label: str) -> None:
        if label == "swap:middle":
            raise Crash(label)

    with pytest.raises(Crash):
        ScaffoldStore(root, fault=crash).commit(wide_update())
    backup = tmp_path / f".{root.name}.backup"

    team = load_team(root)
    assert team.version == 0
    assert team.root == root
    assert not root.exists()
    assert tree(backup) == old

    ScaffoldStore(root)
    assert tree(root) == old
    assert not backup.exists()


# Skill files

SKILL_TOKENS = ["---", "\n", "\r\n", "- ", ": ", "#", "|", ">", "<!-- x -->", " ", "\t", "é", "`"]


def test_skill_bodies_survive_render_and_parse():
    rng = random.Random(7)
    for _ in range(300):
        body = "".join(rng.choice(SKILL_TOKENS) for _ in range(rng.randint(1, 40)))
        skill = Skill(name="triage", description="Sort issues", body=body, tools=["run_tests"])
        assert parse_skill(render_skill(skill)) == skill
