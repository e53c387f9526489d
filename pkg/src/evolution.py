"""Collaborative self-evolution of a team scaffold.

After each episode the team reflects at three scales:

- L1: every participating agent reviews its own local trace, may ask
  teammates for evidence, and proposes patches, skills and a short summary.
- L2: every pair that exchanged messages revises how each side profiles and
  relies on the other.
- L3: the team reads the summaries plus selected evidence (never the full
  trajectory) and may rewrite the constitution, organization or pool.

The assembled update goes through the commit gate; only accepted, non-empty
updates reach the scaffold store. Reflection spend and retries are charged to
a separate evolution budget, never to the frozen episode.
"""

import asyncio
import json
import logging
import re
from collections.abc import Awaitable, Callable, Iterable, Sequence
from datetime import datetime
from decimal import Decimal
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator

from . import config, prompts
from .attribution import parse_json_object
from .clock import Clock, SystemClock
from .errors import (
    DuplicateAgentName,
    ImmutableExperience,
    MetaTeamError,
    ParseFailure,
    PersistFailure,
    ReflectionBudgetExceeded,
    ReflectionTimeout,
    ScaffoldError,
    ScaffoldFormatError,
)
from .evaluators import Evaluator
from .model_gateway import ModelGateway
from .runtime_bus import run_task
from .scaffold_store import (
    SAFE_NAME,
    AgentScaffold,
    BehavioralPatch,
    ScaffoldStore,
    TeamScaffold,
    load_team,
    merge_update,
    parse_skill,
)
from .tools import ToolRegistry
from .trace_store import export_experience, local_trace
from .types import (
    SYSTEM_ACTOR,
    Budget,
    ChatMessage,
    ChatRequest,
    EventKind,
    Experience,
    LocalTrace,
    Task,
    TaskOutcome,
    Trajectory,
)
from .updates import EvolutionUpdate, L1Entry, L2Entry, L3Revision, NewAgent, SkillEdit

if TYPE_CHECKING:
    from .database import ExperienceIndex

logger = logging.getLogger(__name__)

R = TypeVar("R")

Scale = Literal["l1", "l2", "l3"]

IDENTITY = re.compile(r"\byou are (?:now |actually )?(?:an? |the )?@?([A-Za-z][\w.-]*)", re.I)
DENIAL = re.compile(r"\byou are not (?:an? |the )?@?([A-Za-z][\w.-]*)", re.I)
MENTION = re.compile(r"(?<![\w.@])@([A-Za-z0-9][A-Za-z0-9_.-]*)")
TOOL_BACKTICK = re.compile(r"`([A-Za-z][A-Za-z0-9]*_[A-Za-z0-9_]*)(?:\([^`]*\))?`")
TOOL_CALL_FORM = re.compile(r"\b([A-Za-z][A-Za-z0-9]*_[A-Za-z0-9_]*)\(")
TOOL_VERB = re.compile(
    r"\b(?:use|call|invoke|run)\s+(?:the\s+)?`?([A-Za-z][A-Za-z0-9]*_[A-Za-z0-9_]*)", re.I
)


class EvolutionSettings(BaseModel):
    """Switches and limits for one evolution run."""

    scales: frozenset[Scale] = frozenset({"l1", "l2", "l3"})
    exchange: Literal["collaborative", "partitioned"] = "collaborative"
    max_patches: int = Field(default=config.MAX_PATCHES_PER_REFLECTION, ge=0)
    max_questions: int = Field(default=config.MAX_EVIDENCE_QUESTIONS, ge=0)
    reflection_cost_cap: Decimal = Field(default=Decimal(config.REFLECTION_COST_CAP), gt=0)
    phase_timeout: float = config.PHASE_TIMEOUT_SECONDS
    model: str | None = None
    temperature: float = Field(default=config.DEFAULT_TEMPERATURE, ge=0, le=2)

    @field_validator("phase_timeout")
    @classmethod
    def _timeout_in_range(cls, value: float) -> float:
        low, high = config.PHASE_TIMEOUT_RANGE_SECONDS
        if not low <= value <= high:
            raise ValueError(f"phase timeout must lie within {low}-{high} s")
        return value


class EvidenceExchange(BaseModel):
    asker: str
    target: str
    question: str
    answer: str
    cost: Decimal = Decimal("0")


class GateCheck(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class GateReport(BaseModel):
    checks: list[GateCheck]

    @computed_field
    @property
    def accepted(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def check(self, name: str) -> GateCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


class ReflectionResult(BaseModel):
    """Spend and fate of one reflection; ``aborted`` means it crossed its cost cap."""

    key: str
    cost: Decimal = Decimal("0")
    note: str | None = None
    aborted: bool = False


class L1Reflection(ReflectionResult):
    agent: str
    entry: L1Entry
    evidence: list[EvidenceExchange] = Field(default_factory=list)


class L2Reflection(ReflectionResult):
    entry: L2Entry


class L3Reflection(ReflectionResult):
    revision: L3Revision = Field(default_factory=L3Revision)


class EpisodeEvolution(BaseModel):
    """What one episode's reflection did to the team."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    episode_id: str
    team: TeamScaffold
    version_before: int
    update: EvolutionUpdate
    report: GateReport
    committed: bool
    retried: bool = False
    retry: Experience | None = None
    budget: Budget
    evolution_cost: Decimal
    notes: list[str] = Field(default_factory=list)


class AuditEntry(BaseModel):
    """One line of the evolution audit log."""

    episode_id: str
    task_id: str
    version_before: int
    version_after: int
    report: GateReport | None = None
    committed: bool = False
    retried: bool = False
    retry_episode_id: str | None = None
    passed: bool | None = None
    retry_passed: bool | None = None
    evolution_cost: Decimal = Decimal("0")
    note: str | None = None
    created: datetime


class EvolutionRun(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    team: TeamScaffold
    audit: list[AuditEntry]
    experiences: list[Path] = Field(default_factory=list)


# Trace rendering


def _dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


def trace_lines(local: LocalTrace) -> list[str]:
    """Readable lines of a local trace; flagged step numbers index this list from 1."""
    lines: list[str] = []
    for event in local.events:
        payload = event.payload
        match event.kind:
            case EventKind.MESSAGE if event.actor == local.agent:
                lines.append(f"to {event.recipient}: {payload.get('body', '')}")
            case EventKind.MESSAGE:
                lines.append(f"from {event.actor}: {payload.get('body', '')}")
            case EventKind.MODEL_RESULT:
                calls = [
                    f"{c.get('name')}({_dumps(c.get('arguments', {}))})"
                    for c in payload.get("tool_calls", [])
                ]
                lines.append(" ".join(["said:", payload.get("text", ""), *calls]).strip())
            case EventKind.TOOL_RESULT:
                result = payload.get("error", payload.get("result"))
                lines.append(f"{payload.get('name')} returned: {_dumps(result)}")
            case EventKind.LIFECYCLE:
                lines.append(f"[{payload.get('op')}] {payload.get('agent', '')}".rstrip())
    return lines


def _numbered(lines: Sequence[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1)) or "(empty)"


def _outcome_text(outcome: TaskOutcome) -> str:
    verdict = "passed" if outcome.passed else "failed"
    return (
        f"{verdict} (score {outcome.score}, ended by {outcome.reason.value}, "
        f"finalized by {outcome.finalized_by})"
    )


def interacting_pairs(trajectory: Trajectory) -> list[tuple[str, str]]:
    """Sorted pairs of distinct agents with at least one message either way."""
    pairs: set[tuple[str, str]] = set()
    for event in trajectory.events:
        if event.kind is not EventKind.MESSAGE or not event.recipient:
            continue
        if SYSTEM_ACTOR in (event.actor, event.recipient) or event.actor == event.recipient:
            continue
        a, b = sorted((event.actor, event.recipient))
        pairs.add((a, b))
    return sorted(pairs)


# Reflection calls


class _Spend:
    """Model calls of one reflection, aborting once its cost passes the cap."""

    def __init__(self, key: str, gateway: ModelGateway, settings: EvolutionSettings):
        self.key = key
        self.gateway = gateway
        self.settings = settings
        self.cost = Decimal("0")

    async def ask(self, content: str, model: str, agent: str, step: int) -> str:
        request = ChatRequest(
            model=self.settings.model or model,
            messages=[ChatMessage(role="user", content=content)],
            temperature=self.settings.temperature,
            agent=agent,
            step=step,
        )
        response = await self.gateway.complete(request)
        self.cost += response.cost
        if self.cost > self.settings.reflection_cost_cap:
            raise ReflectionBudgetExceeded(
                f"{self.key} spent {self.cost}, over the cap of {self.settings.reflection_cost_cap}"
            )
        return response.text


async def _guarded(
    key: str,
    work: Callable[[_Spend], Awaitable[R]],
    gateway: ModelGateway,
    settings: EvolutionSettings,
    clock: Clock,
) -> tuple[R | None, Decimal, str | None, bool]:
    """Run one reflection under the phase timeout; failures yield no result."""
    spend = _Spend(key, gateway, settings)
    try:
        result = await clock.wait_for(work(spend), settings.phase_timeout)
        if result is None:
            raise ReflectionTimeout(f"{key} exceeded {settings.phase_timeout}s")
        return result, spend.cost, None, False
    except (ReflectionTimeout, ReflectionBudgetExceeded, ParseFailure) as e:
        logger.warning(f"Reflection {key} produced no update: {e}")
        aborted = isinstance(e, ReflectionBudgetExceeded)
        return None, spend.cost, f"{type(e).__name__}: {e}", aborted


def _model_of(team: TeamScaffold, name: str) -> str:
    if team.has_agent(name):
        return team.agent(name).config.backbone
    return team.agent(team.entry_agent).config.backbone


def _texts(value: Any) -> list[str]:
    if not isinstance(value, list):
        return []
    out = []
    for item in value:
        if isinstance(item, dict):
            item = item.get("text", "")
        if isinstance(item, str) and item.strip():
            out.append(item.strip())
    return out


def _skill_text(item: dict[str, Any]) -> str:
    front: dict[str, Any] = {
        "name": str(item.get("name", "")),
        "description": str(item.get("description", "")),
    }
    if item.get("tools"):
        front["tools"] = [str(t) for t in item["tools"]]
    header = yaml.safe_dump(front, sort_keys=False, allow_unicode=True, width=1_000_000)
    return f"---\n{header}---\n{item.get('body', '')}"


def _patch_id(episode_id: str, agent: str, n: int) -> str:
    return re.sub(r"\s+", "_", f"{episode_id}-{agent}-{n}")


def l1_entry(
    agent: str,
    data: dict[str, Any],
    lines: Sequence[str],
    episode_id: str,
    settings: EvolutionSettings,
) -> L1Entry:
    """Turn a parsed L1 answer into an entry, capping patches and summary length."""
    texts = _texts(data.get("patches"))
    if len(texts) > settings.max_patches:
        logger.warning(f"{agent} proposed {len(texts)} patches; keeping {settings.max_patches}")
        texts = texts[: settings.max_patches]
    patches = [
        BehavioralPatch(id=_patch_id(episode_id, agent, n), text=text, provenance=episode_id)
        for n, text in enumerate(texts, start=1)
    ]

    skills = []
    for item in data.get("skills") or []:
        if not isinstance(item, dict) or not item.get("name"):
            logger.warning(f"Skipping unnamed skill from {agent}")
            continue
        content = item["content"] if isinstance(item.get("content"), str) else _skill_text(item)
        skills.append(SkillEdit(name=str(item["name"]), content=content))

    flagged = []
    for step in data.get("flagged_steps") or []:
        if isinstance(step, int) and 1 <= step <= len(lines):
            excerpt = lines[step - 1][: config.EVIDENCE_EXCERPT_CHARS]
            flagged.append(f"{agent} step {step}: {excerpt}")

    summary = str(data.get("summary") or "").strip()[: config.SUMMARY_MAX_CHARS]
    return L1Entry(
        patches=patches,
        skills=skills,
        summary=summary or f"{agent} reported no findings.",
        flagged=flagged,
    )


def _questions(data: dict[str, Any], teammates: Sequence[str], limit: int) -> list[tuple[str, str]]:
    asked = []
    for item in data.get("questions") or []:
        if not isinstance(item, dict):
            continue
        target, question = item.get("target"), str(item.get("question") or "").strip()
        if target not in teammates or not question:
            logger.warning(f"Dropping evidence question to {target!r}")
            continue
        asked.append((target, question))
    return asked[:limit]


async def evolve_l1(
    team: TeamScaffold,
    agent: str,
    experience: Experience,
    gateway: ModelGateway,
    settings: EvolutionSettings | None = None,
    clock: Clock | None = None,
) -> L1Reflection:
    """Agent-level reflection over ``agent``'s local trace.

    With collaborative exchange the first answer may carry questions for
    teammates; each target answers from its own local trace and the agent
    reflects a second time with the answers in view.
    """
    settings = settings or EvolutionSettings()
    clock = clock or SystemClock()
    trajectory = experience.trajectory
    scaffold = team.agent(agent)
    lines = trace_lines(local_trace(trajectory, agent))
    teammates = [a for a in trajectory.agents if a != agent]
    collaborative = (
        settings.exchange == "collaborative" and bool(teammates) and settings.max_questions > 0
    )
    exchanges: list[EvidenceExchange] = []

    def prompt(evidence: str, hint: str) -> str:
        return prompts.L1_REFLECTION.format(
            agent=agent,
            role=scaffold.role_header,
            task=experience.task.input,
            outcome=_outcome_text(experience.outcome),
            trace=_numbered(lines),
            evidence=evidence,
            max_patches=settings.max_patches,
            summary_chars=config.SUMMARY_MAX_CHARS,
            questions_hint=hint,
        )

    async def work(spend: _Spend) -> L1Entry:
        hint = ""
        if collaborative:
            hint = prompts.L1_QUESTIONS_HINT.format(
                max_questions=settings.max_questions, teammates=", ".join(teammates)
            )
        model = scaffold.config.backbone
        data = parse_json_object(await spend.ask(prompt("", hint), model, f"reflect:{agent}", 1))
        questions = _questions(data, teammates, settings.max_questions) if collaborative else []
        if not questions:
            return l1_entry(agent, data, lines, experience.episode_id, settings)

        for n, (target, question) in enumerate(questions, start=1):
            before = spend.cost
            answer = await spend.ask(
                prompts.EVIDENCE_ANSWER.format(
                    agent=target,
                    asker=agent,
                    question=question,
                    trace=_numbered(trace_lines(local_trace(trajectory, target))),
                ),
                _model_of(team, target),
                f"evidence:{target}",
                n,
            )
            exchanges.append(
                EvidenceExchange(
                    asker=agent,
                    target=target,
                    question=question,
                    answer=answer.strip(),
                    cost=spend.cost - before,
                )
            )
        evidence = "\nEvidence from teammates:\n" + "\n".join(
            f"- {e.target}, asked \"{e.question}\": {e.answer}" for e in exchanges
        )
        text = await spend.ask(prompt(evidence, ""), model, f"reflect:{agent}", 2)
        data = parse_json_object(text)
        return l1_entry(agent, data, lines, experience.episode_id, settings)

    key = f"l1:{agent}"
    entry, cost, note, aborted = await _guarded(key, work, gateway, settings, clock)
    if entry is None:
        entry = L1Entry(summary=f"{agent} could not reflect on this episode.", note=note)
    return L1Reflection(
        key=key,
        agent=agent,
        entry=entry,
        evidence=exchanges if note is None else [],
        cost=cost,
        note=note,
        aborted=aborted,
    )


def _owned(value: Any, pair: tuple[str, str], what: str) -> dict[str, str]:
    if not isinstance(value, dict):
        return {}
    edits = {}
    for owner, text in value.items():
        if owner not in pair:
            logger.warning(f"Ignoring {what} for {owner!r}: not part of {pair}")
        elif isinstance(text, str) and text.strip():
            edits[owner] = text.strip()
    return edits


async def evolve_l2(
    team: TeamScaffold,
    pair: tuple[str, str],
    experience: Experience,
    gateway: ModelGateway,
    settings: EvolutionSettings | None = None,
    clock: Clock | None = None,
) -> L2Reflection:
    """Interaction-level reflection for one pair that exchanged messages."""
    settings = settings or EvolutionSettings()
    clock = clock or SystemClock()
    a, b = pair
    exchange = [
        f"{e.actor} -> {e.recipient}: {e.payload.get('body', '')}"
        for e in experience.trajectory.events
        if e.kind is EventKind.MESSAGE and {e.actor, e.recipient} == {a, b}
    ]

    def profile(owner: str, subject: str) -> str:
        found = team.agent(owner).profiles.get(subject)
        return found.text if found else "(none)"

    content = prompts.L2_REFLECTION.format(
        a=a,
        b=b,
        task=experience.task.input,
        outcome=_outcome_text(experience.outcome),
        exchange="\n".join(exchange) or "(none)",
        profile_ab=profile(a, b),
        profile_ba=profile(b, a),
    )

    async def work(spend: _Spend) -> L2Entry:
        text = await spend.ask(content, _model_of(team, team.entry_agent), f"pair:{a}+{b}", 1)
        data = parse_json_object(text)
        return L2Entry(
            pair=pair,
            profiles=_owned(data.get("profiles"), pair, "profile"),
            notes=_owned(data.get("notes"), pair, "note"),
        )

    key = f"l2:{a}+{b}"
    entry, cost, note, aborted = await _guarded(key, work, gateway, settings, clock)
    return L2Reflection(
        key=key, entry=entry or L2Entry(pair=pair), cost=cost, note=note, aborted=aborted
    )


def selected_evidence(reflections: Iterable[L1Reflection]) -> list[str]:
    """Evidence replies and flagged excerpts, the only trace content L3 gets to see."""
    selected = []
    for r in sorted(reflections, key=lambda r: r.agent):
        for e in r.evidence:
            selected.append(f"{e.asker} asked {e.target} \"{e.question}\": {e.answer}")
        selected.extend(r.entry.flagged)
    return selected


def _optional_text(value: Any) -> str | None:
    if not isinstance(value, str) or not value.strip() or value.strip().lower() == "null":
        return None
    return value


def _new_agents(value: Any) -> list[NewAgent]:
    agents = []
    for item in value or []:
        if isinstance(item, str):
            item = {"name": item}
        if isinstance(item, dict) and item.get("name"):
            tools = item.get("allowed_tools")
            agents.append(
                NewAgent(
                    name=str(item["name"]),
                    role=str(item.get("role") or ""),
                    role_prompt=str(item.get("role_prompt") or ""),
                    allowed_tools=[str(t) for t in tools] if isinstance(tools, list) else None,
                )
            )
    return agents


def l3_revision(data: dict[str, Any]) -> L3Revision:
    retry = data.get("retry", False)
    return L3Revision(
        constitution=_optional_text(data.get("constitution")),
        organization=_optional_text(data.get("organization")),
        add_agents=_new_agents(data.get("add_agents")),
        remove_agents=[str(n) for n in data.get("remove_agents") or []],
        retry_requested=retry is True or str(retry).lower() == "true",
        rationale=str(data.get("rationale") or ""),
    )


async def evolve_l3(
    team: TeamScaffold,
    summaries: dict[str, str],
    evidence: Sequence[str],
    experience: Experience,
    gateway: ModelGateway,
    settings: EvolutionSettings | None = None,
    clock: Clock | None = None,
) -> L3Reflection:
    """Team-level revision from summaries and selected evidence only."""
    settings = settings or EvolutionSettings()
    clock = clock or SystemClock()
    content = prompts.L3_REVISION.format(
        task=experience.task.input,
        outcome=_outcome_text(experience.outcome),
        constitution=team.constitution,
        organization=team.organization or "(none)",
        roster="\n".join(f"- {a.name}: {a.role_summary}" for a in team.pool),
        summaries="\n".join(f"- {name}: {u}" for name, u in sorted(summaries.items())) or "(none)",
        evidence="\n".join(f"- {item}" for item in evidence) or "(none)",
    )

    async def work(spend: _Spend) -> L3Revision:
        text = await spend.ask(content, _model_of(team, team.entry_agent), "team", 1)
        return l3_revision(parse_json_object(text))

    revision, cost, note, aborted = await _guarded("l3", work, gateway, settings, clock)
    return L3Reflection(
        key="l3", revision=revision or L3Revision(), cost=cost, note=note, aborted=aborted
    )


# Commit gate


def tool_mentions(text: str) -> set[str]:
    """Identifiers a text refers to as tools: backticked, called, or after use/call/invoke."""
    found: set[str] = set()
    for pattern in (TOOL_BACKTICK, TOOL_CALL_FORM, TOOL_VERB):
        found.update(m.group(1) for m in pattern.finditer(text))
    return found


def _mentions(text: str) -> set[str]:
    return {m.group(1).rstrip(".-") for m in MENTION.finditer(text)}


def _role_issues(owner: str, text: str, headers: dict[str, str]) -> list[str]:
    """Identity claims in ``text`` that contradict ``owner``'s declared role."""
    own = {owner.lower()}
    if owner in headers:
        own.add(headers[owner].lower())
    others = {n.lower() for n in headers if n != owner}
    others |= {h.lower() for n, h in headers.items() if n != owner}
    others -= own
    issues = []
    for match in IDENTITY.finditer(text):
        if match.group(1).rstrip(".,;:!").lower() in others:
            issues.append(f"{owner}: '{match.group(0)}' claims another teammate's role")
    for match in DENIAL.finditer(text):
        if match.group(1).rstrip(".,;:!").lower() in own:
            issues.append(f"{owner}: '{match.group(0)}' denies its own role")
    return issues


def _check(name: str, issues: list[str], ok: str) -> GateCheck:
    return GateCheck(name=name, passed=not issues, detail="; ".join(issues) or ok)


def _skill_bodies(edits: Iterable[SkillEdit]) -> list[str]:
    return [e.content for e in edits]


def commit_gate(
    update: EvolutionUpdate,
    team: TeamScaffold,
    budget: Budget,
    tools: ToolRegistry | None = None,
    settings: EvolutionSettings | None = None,
) -> GateReport:
    """Validate ``update`` against ``team`` before anything is written.

    ``budget`` is the evolution budget with this update's spend already
    charged. All four checks always run; failures are reported, not raised.
    """
    tools = tools or ToolRegistry()
    settings = settings or EvolutionSettings()
    l3 = update.l3
    pool = set(team.names)
    added = [a.name for a in l3.add_agents]
    known = (pool - set(l3.remove_agents)) | set(added)
    headers = {a.name: a.role_header for a in team.pool}

    # role consistency
    role: list[str] = []
    for name, entry in update.l1.items():
        if name not in pool:
            role.append(f"L1 entry for unknown agent '{name}'")
            continue
        for text in [p.text for p in entry.patches] + _skill_bodies(entry.skills):
            role.extend(_role_issues(name, text, headers))
            role.extend(f"{name}: @{m} is not a teammate" for m in _mentions(text) - known)
    for entry in update.l2:
        for member in entry.pair:
            if member not in known:
                role.append(f"L2 pair {entry.pair} names unknown agent '{member}'")
        for owner, text in (*entry.profiles.items(), *entry.notes.items()):
            role.extend(_role_issues(owner, text, headers))
            role.extend(f"{owner}: @{m} is not a teammate" for m in _mentions(text) - known)
    for name in l3.remove_agents:
        if name not in pool:
            role.append(f"cannot remove '{name}': not in the pool")
        if name == team.entry_agent:
            role.append(f"cannot remove the entry agent '{name}'")
    for name in added:
        if name in pool or added.count(name) > 1:
            role.append(f"cannot add '{name}': name already taken")
    for text in (l3.constitution or "", l3.organization or ""):
        role.extend(f"team: @{m} is not a teammate" for m in _mentions(text) - known)

    # tool availability
    missing: list[str] = []
    for name, entry in update.l1.items():
        mentioned: set[str] = set()
        for text in [p.text for p in entry.patches] + _skill_bodies(entry.skills):
            mentioned |= tool_mentions(text)
        for tool in sorted(mentioned):
            if not tools.is_registered(tool):
                missing.append(f"{name}: unregistered tool '{tool}'")
        for edit in entry.skills:
            try:
                declared = parse_skill(edit.content).tools
            except ScaffoldFormatError:
                continue
            missing.extend(
                f"{name}/{edit.name}: unregistered tool '{t}'"
                for t in declared
                if not tools.is_registered(t)
            )
    for spec in l3.add_agents:
        missing.extend(
            f"{spec.name}: unregistered tool '{t}'"
            for t in spec.allowed_tools or []
            if not tools.is_registered(t)
        )

    # formatting
    formatting: list[str] = []
    for name, entry in update.l1.items():
        existing = {p.id for p in team.agent(name).patches} if name in pool else set()
        for patch in entry.patches:
            if patch.id in existing:
                formatting.append(f"{name}: duplicate patch id '{patch.id}'")
            existing.add(patch.id)
        for edit in entry.skills:
            file = f"agents/{name}/skills/{edit.name}/SKILL.md"
            try:
                skill = parse_skill(edit.content, file)
            except ScaffoldFormatError as e:
                formatting.append(str(e))
                continue
            if skill.name != edit.name:
                formatting.append(f"{file}: front matter names '{skill.name}'")
    for spec in l3.add_agents:
        if not SAFE_NAME.match(spec.name):
            formatting.append(f"'{spec.name}' is not a filesystem-safe agent name")
    if l3.constitution is not None and not l3.constitution.strip():
        formatting.append("constitution is empty")
    if not formatting and not role:
        try:
            merge_update(team, update)
        except (MetaTeamError, ValueError) as e:
            formatting.append(f"merged scaffold is invalid: {e}")

    # budget
    spend: list[str] = []
    cap = settings.reflection_cost_cap
    for key, cost in sorted(update.costs.items()):
        if cost > cap:
            spend.append(f"{key} spent {cost}, over the per-reflection cap of {cap}")
    if budget.spent_cost > budget.max_cost:
        spend.append(f"evolution spend {budget.spent_cost} exceeds budget {budget.max_cost}")

    return GateReport(
        checks=[
            _check("role_consistency", role, "roles consistent"),
            _check("tool_availability", missing, "all tools registered"),
            _check("formatting", formatting, "all files parse"),
            _check("budget", spend, f"spent {budget.spent_cost} of {budget.max_cost}"),
        ]
    )


def check_scaffold(root: str | Path, tools: ToolRegistry | None = None) -> GateReport:
    """The commit gate's checks applied to a scaffold on disk."""
    tools = tools or ToolRegistry()
    skipped = "not checked: scaffold did not load"
    try:
        team = load_team(root)
    except DuplicateAgentName as e:
        return GateReport(
            checks=[
                GateCheck(name="role_consistency", passed=False, detail=str(e)),
                GateCheck(name="tool_availability", passed=True, detail=skipped),
                GateCheck(name="formatting", passed=True, detail=skipped),
                GateCheck(name="budget", passed=True, detail="no evolution spend"),
            ]
        )
    except ScaffoldError as e:
        return GateReport(
            checks=[
                GateCheck(name="role_consistency", passed=True, detail=skipped),
                GateCheck(name="tool_availability", passed=True, detail=skipped),
                GateCheck(name="formatting", passed=False, detail=str(e)),
                GateCheck(name="budget", passed=True, detail="no evolution spend"),
            ]
        )

    headers = {a.name: a.role_header for a in team.pool}
    names = set(team.names)
    role: list[str] = []
    missing: list[str] = []
    for agent in team.pool:
        texts = [p.text for p in agent.patches] + [s.body for s in agent.skills]
        for text in texts:
            role.extend(_role_issues(agent.name, text, headers))
            role.extend(f"{agent.name}: @{m} is not a teammate" for m in _mentions(text) - names)
            missing.extend(
                f"{agent.name}: unregistered tool '{t}'"
                for t in sorted(tool_mentions(text))
                if not tools.is_registered(t)
            )
        for subject in (*agent.profiles, *agent.notes):
            if subject not in names:
                role.append(f"{agent.name}: profile or note about unknown agent '{subject}'")
        declared = list(agent.config.allowed_tools)
        for skill in agent.skills:
            declared.extend(skill.tools)
        missing.extend(
            f"{agent.name}: unregistered tool '{t}'" for t in declared if not tools.is_registered(t)
        )
    for text in (team.constitution, team.organization):
        role.extend(f"team: @{m} is not a teammate" for m in _mentions(text) - names)

    return GateReport(
        checks=[
            _check("role_consistency", role, "roles consistent"),
            _check("tool_availability", missing, "all tools registered"),
            GateCheck(name="formatting", passed=True, detail="all files parse"),
            GateCheck(name="budget", passed=True, detail="no evolution spend"),
        ]
    )


# Episode and curriculum drivers


def _assemble(
    experience: Experience,
    l1: Sequence[L1Reflection],
    l2: Sequence[L2Reflection],
    l3: L3Reflection | None,
) -> EvolutionUpdate:
    removed = set(l3.revision.remove_agents) if l3 else set()
    entries: dict[str, L1Entry] = {}
    for r in l1:
        entry = r.entry
        if r.agent in removed and not entry.is_empty:
            logger.info(f"Dropping L1 edits for {r.agent}: the team revision retires it")
            entry = entry.model_copy(update={"patches": [], "skills": []})
        entries[r.agent] = entry
    pairs = []
    for r in l2:
        if removed & set(r.entry.pair):
            logger.info(f"Dropping L2 edits for {r.entry.pair}: the team revision retires one side")
            continue
        pairs.append(r.entry)
    reflections: list[ReflectionResult] = [*l1, *l2, *([l3] if l3 else [])]
    return EvolutionUpdate(
        episode_id=experience.episode_id,
        l1=entries,
        l2=pairs,
        l3=l3.revision if l3 else L3Revision(),
        costs={r.key: r.cost for r in reflections if not r.aborted},
    )


async def evolve_episode(
    store: ScaffoldStore,
    experience: Experience,
    gateway: ModelGateway,
    budget: Budget,
    evaluator: Evaluator | None = None,
    episode_budget: Budget | None = None,
    settings: EvolutionSettings | None = None,
    tools: ToolRegistry | None = None,
    clock: Clock | None = None,
    **run_options: Any,
) -> EpisodeEvolution:
    """Reflect on one frozen episode, gate and commit, then maybe retry once.

    ``budget`` is the evolution budget for this episode; it is charged with
    every reflection, evidence answer and retry. A retry needs an evaluator,
    an episode budget and remaining evolution budget.
    """
    settings = settings or EvolutionSettings()
    tools = tools or ToolRegistry()
    clock = clock or SystemClock()
    budget = budget.model_copy()
    team = store.snapshot()
    version_before = team.version
    if experience.team_version != team.version:
        logger.warning(
            f"Experience {experience.episode_id} ran on version {experience.team_version}; "
            f"reflecting against version {team.version}"
        )
    notes: list[str] = []
    participants = [a for a in experience.trajectory.agents if team.has_agent(a)]

    l1: list[L1Reflection] = []
    if "l1" in settings.scales:
        l1 = list(
            await asyncio.gather(
                *(evolve_l1(team, a, experience, gateway, settings, clock) for a in participants)
            )
        )
    l2: list[L2Reflection] = []
    if "l2" in settings.scales:
        pairs = [
            p for p in interacting_pairs(experience.trajectory) if all(map(team.has_agent, p))
        ]
        l2 = list(
            await asyncio.gather(
                *(evolve_l2(team, p, experience, gateway, settings, clock) for p in pairs)
            )
        )
    l3: L3Reflection | None = None
    if "l3" in settings.scales:
        summaries = {r.agent: r.entry.summary for r in l1} or {
            a: f"{a} took part in the episode." for a in participants
        }
        l3 = await evolve_l3(
            team, summaries, selected_evidence(l1), experience, gateway, settings, clock
        )
    notes.extend(r.note for r in [*l1, *l2, *([l3] if l3 else [])] if r.note)

    update = _assemble(experience, l1, l2, l3)
    reflection_cost = sum(
        (r.cost for r in [*l1, *l2, *([l3] if l3 else [])]), Decimal("0")
    )
    budget.spent_cost += reflection_cost

    report = commit_gate(update, team, budget, tools, settings)
    committed = False
    if not report.accepted:
        logger.warning(
            f"Commit gate rejected {experience.episode_id}: {', '.join(report.failed)}"
        )
    elif update.is_empty:
        logger.info(f"No changes from {experience.episode_id}; version stays {team.version}")
    else:
        team = store.commit(update)
        committed = True

    retried = False
    retry: Experience | None = None
    if l3 is not None and l3.revision.retry_requested:
        if experience.retry_of is not None:
            notes.append("no-retry: episode is already a retry")
        elif evaluator is None or episode_budget is None:
            notes.append("no-retry: no evaluator or episode budget for a retry")
        elif budget.remaining_cost <= 0:
            notes.append("no-retry: evolution budget exhausted")
        else:
            retry = await run_task(
                team,
                experience.task,
                episode_budget.scaled(1),
                gateway,
                evaluator,
                clock,
                tools,
                episode_id=f"{experience.episode_id}-retry",
                retry_of=experience.episode_id,
                **run_options,
            )
            budget.spent_cost += retry.total_cost
            retried = True
        if not retried:
            logger.info(f"Retry for {experience.episode_id} denied ({notes[-1]})")

    return EpisodeEvolution(
        episode_id=experience.episode_id,
        team=team,
        version_before=version_before,
        update=update,
        report=report,
        committed=committed,
        retried=retried,
        retry=retry,
        budget=budget,
        evolution_cost=reflection_cost + (retry.total_cost if retry else Decimal("0")),
        notes=notes,
    )


def _append_audit(path: Path, entry: AuditEntry) -> None:
    line = json.dumps(entry.model_dump(mode="json"), sort_keys=True, ensure_ascii=False)
    with path.open("a", encoding="utf-8") as f:
        f.write(line + "\n")


def load_audit(path: str | Path) -> list[AuditEntry]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        AuditEntry.model_validate_json(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


async def run_evolution(
    store: ScaffoldStore,
    tasks: Sequence[Task],
    gateway: ModelGateway,
    evaluator: Evaluator,
    episode_budget: Budget,
    evolution_budget: Budget,
    out_dir: str | Path,
    settings: EvolutionSettings | None = None,
    tools: ToolRegistry | None = None,
    clock: Clock | None = None,
    index: "ExperienceIndex | None" = None,
    resume: bool = False,
    **run_options: Any,
) -> EvolutionRun:
    """Run, freeze, reflect and commit over an ordered task stream.

    Experiences go to ``out_dir/experiences`` and one audit line per episode
    to ``out_dir/audit.jsonl``. With ``resume`` the episodes already in the
    audit log are skipped and the run continues from the committed scaffold.
    Only a failed commit aborts the run; other episode failures are audited.
    """
    settings = settings or EvolutionSettings()
    tools = tools or ToolRegistry()
    clock = clock or SystemClock()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    audit_path = out / "audit.jsonl"
    if audit_path.exists() and not resume:
        raise ImmutableExperience(f"{audit_path} already exists; resume or pick another directory")
    audit = load_audit(audit_path) if resume else []
    done = {entry.episode_id for entry in audit}
    paths: list[Path] = []

    async def keep(experience: Experience) -> None:
        path = export_experience(experience, out / "experiences" / f"{experience.episode_id}.jsonl")
        paths.append(path)
        if index is not None:
            await index.record_experience(experience, path)

    for k, task in enumerate(tasks, start=1):
        episode_id = f"e{k:03d}-{task.id}"
        if episode_id in done:
            logger.info(f"Skipping {episode_id}: already in the audit log")
            continue
        team = store.snapshot()
        logger.info(f"Episode {k}/{len(tasks)}: task {task.id} on version {team.version}")
        try:
            experience = await run_task(
                team,
                task,
                episode_budget.scaled(1),
                gateway,
                evaluator,
                clock,
                tools,
                episode_id=episode_id,
                **run_options,
            )
            await keep(experience)
            result = await evolve_episode(
                store,
                experience,
                gateway,
                evolution_budget.scaled(1),
                evaluator=evaluator,
                episode_budget=episode_budget,
                settings=settings,
                tools=tools,
                clock=clock,
                **run_options,
            )
        except PersistFailure:
            raise
        except MetaTeamError as e:
            logger.error(f"Episode {episode_id} failed: {e}")
            entry = AuditEntry(
                episode_id=episode_id,
                task_id=task.id,
                version_before=team.version,
                version_after=team.version,
                note=f"{type(e).__name__}: {e}",
                created=clock.wall(),
            )
        else:
            if result.retry is not None:
                await keep(result.retry)
            entry = AuditEntry(
                episode_id=episode_id,
                task_id=task.id,
                version_before=result.version_before,
                version_after=result.team.version,
                report=result.report,
                committed=result.committed,
                retried=result.retried,
                retry_episode_id=result.retry.episode_id if result.retry else None,
                passed=experience.outcome.passed,
                retry_passed=result.retry.outcome.passed if result.retry else None,
                evolution_cost=result.evolution_cost,
                note="; ".join(result.notes) or None,
                created=clock.wall(),
            )
        _append_audit(audit_path, entry)
        if index is not None:
            await index.record_commit(entry)
        audit.append(entry)

    return EvolutionRun(team=store.snapshot(), audit=audit, experiences=paths)


# Frozen-team evaluation


class EvaluationResult(BaseModel):
    task_id: str
    episode_id: str
    passed: bool
    score: float | None
    cost: Decimal


class EvaluationReport(BaseModel):
    team_version: int
    results: list[EvaluationResult]

    @computed_field
    @property
    def pass_rate(self) -> float:
        if not self.results:
            return 0.0
        return sum(r.passed for r in self.results) / len(self.results)

    @computed_field
    @property
    def average_cost(self) -> Decimal:
        if not self.results:
            return Decimal("0")
        total = sum((r.cost for r in self.results), Decimal("0"))
        return (total / len(self.results)).quantize(Decimal("0.000001"))


async def evaluate_team(
    team: TeamScaffold,
    tasks: Sequence[Task],
    gateway: ModelGateway,
    evaluator: Evaluator,
    budget: Budget,
    clock: Clock | None = None,
    tools: ToolRegistry | None = None,
    exclude_task_ids: Iterable[str] = (),
    out_dir: str | Path | None = None,
    **run_options: Any,
) -> EvaluationReport:
    """Run every task on a frozen team: no reflection, no commits."""
    overlap = sorted({t.id for t in tasks} & set(exclude_task_ids))
    if overlap:
        raise ValueError(f"evaluation tasks overlap the evolution tasks: {', '.join(overlap)}")
    results = []
    for task in tasks:
        experience = await run_task(
            team,
            task,
            budget.scaled(1),
            gateway,
            evaluator,
            clock,
            tools,
            episode_id=f"eval-{task.id}-v{team.version}",
            **run_options,
        )
        if out_dir is not None:
            export_experience(experience, Path(out_dir) / f"{experience.episode_id}.jsonl")
        results.append(
            EvaluationResult(
                task_id=task.id,
                episode_id=experience.episode_id,
                passed=experience.outcome.passed,
                score=experience.outcome.score,
                cost=experience.total_cost,
            )
        )
    report = EvaluationReport(team_version=team.version, results=results)
    logger.info(
        f"Evaluated version {team.version} on {len(results)} tasks: "
        f"pass rate {report.pass_rate:.2f}, average cost {report.average_cost}"
    )
    return report
