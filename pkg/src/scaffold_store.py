"""Team scaffold store: the editable directory tree that defines the team.

Layout::

    <root>/team.yaml                       name, version, entry_agent, pool, organization
    <root>/constitution.md                 shared team constitution
    <root>/agents/<name>/prompt.md         role prompt
    <root>/agents/<name>/config.yaml       backbone, allowed_tools, temperature, max_output_tokens
    <root>/agents/<name>/evolution/patches.md
    <root>/agents/<name>/evolution/profiles/<teammate>.md
    <root>/agents/<name>/evolution/notes/<teammate>.md
    <root>/agents/<name>/skills/<skill>/SKILL.md
    <root>/retired/<name>/...              agents removed by team-level revision

Commits are atomic: the new tree is written to a hidden staging sibling and
swapped in with two renames. A crash between the renames leaves a hidden
backup sibling; readers fall back to it and the next commit or store open
rolls it back into place.
"""

import logging
import re
import shutil
import threading
from collections.abc import Callable
from pathlib import Path
from typing import TYPE_CHECKING, Any

import yaml
from pydantic import (
    BaseModel,
    Field,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from . import config, prompts
from .errors import (
    DuplicateAgentName,
    MalformedAgentDir,
    MissingManifest,
    PersistFailure,
    ScaffoldError,
    ScaffoldFormatError,
    UnknownSkill,
)

if TYPE_CHECKING:
    from .updates import EvolutionUpdate

logger = logging.getLogger(__name__)

SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
PATCH_MARKER = re.compile(r"^<!-- patch id=(?P<id>\S+) provenance=(?P<provenance>\S*) -->$")
UPDATED_MARKER = re.compile(r"^<!-- last_updated: (?P<episode>\S*) -->$")

FaultHook = Callable[[str], None]


def _check_name(value: str) -> str:
    if not value or not SAFE_NAME.match(value) or value in (".", ".."):
        raise ValueError(f"'{value}' is not a filesystem-safe name")
    return value


class AgentConfig(BaseModel):
    """Backbone and tool configuration from ``config.yaml``."""

    backbone: str = config.DEFAULT_MODEL
    allowed_tools: list[str] = Field(default_factory=list)
    temperature: float = Field(default=config.DEFAULT_TEMPERATURE, ge=0.0, le=2.0)
    max_output_tokens: int = Field(default=config.DEFAULT_MAX_OUTPUT_TOKENS, gt=0)


class Skill(BaseModel):
    """A skill; only name and description are shown until it is loaded."""

    name: str
    description: str = Field(max_length=config.SKILL_DESCRIPTION_MAX_CHARS)
    body: str = Field(min_length=1)
    tools: list[str] = Field(default_factory=list)

    _check = field_validator("name")(_check_name)

    @field_validator("description")
    @classmethod
    def _one_line(cls, value: str) -> str:
        if "\n" in value:
            raise ValueError("description must be a single line")
        return value


class BehavioralPatch(BaseModel):
    """An imperative directive appended to an agent's prompt."""

    id: str
    text: str = Field(min_length=1)
    provenance: str = ""

    @field_validator("text")
    @classmethod
    def _strip(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("patch text is empty")
        return value

    @field_validator("id")
    @classmethod
    def _no_spaces(cls, value: str) -> str:
        if not value or any(c.isspace() for c in value):
            raise ValueError("patch id must be a non-empty token")
        return value


class TeammateProfile(BaseModel):
    """How one agent understands a teammate."""

    subject: str
    text: str
    last_updated: str = ""


class CollaborationNote(TeammateProfile):
    """Pairwise note about working with a teammate."""


class AgentScaffold(BaseModel):
    """Per-agent scaffold: role prompt, patches, skills, profiles, notes, config."""

    name: str
    role_prompt: str
    patches: list[BehavioralPatch] = Field(default_factory=list)
    skills: list[Skill] = Field(default_factory=list)
    profiles: dict[str, TeammateProfile] = Field(default_factory=dict)
    notes: dict[str, CollaborationNote] = Field(default_factory=dict)
    config: AgentConfig = Field(default_factory=AgentConfig)

    _check = field_validator("name")(_check_name)

    @model_validator(mode="after")
    def _consistent(self) -> "AgentScaffold":
        if self.name in self.profiles or self.name in self.notes:
            raise ValueError(f"agent '{self.name}' cannot profile itself")
        names = [s.name for s in self.skills]
        if len(names) != len(set(names)):
            raise ValueError(f"agent '{self.name}' has duplicate skill names")
        ids = [p.id for p in self.patches]
        if len(ids) != len(set(ids)):
            raise ValueError(f"agent '{self.name}' has duplicate patch ids")
        return self

    @property
    def role_header(self) -> str:
        """First heading of the role prompt, e.g. ``Developer``."""
        for line in self.role_prompt.splitlines():
            if line.startswith("#"):
                return line.lstrip("#").strip()
        return self.name

    @property
    def role_summary(self) -> str:
        """One-line role description for roster listings."""
        for line in self.role_prompt.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                return line[:120]
        return self.role_header

    def skill(self, name: str) -> Skill:
        for skill in self.skills:
            if skill.name == name:
                return skill
        raise UnknownSkill(self.name, name)


class TeamScaffold(BaseModel):
    """Shared scaffold: agent pool, constitution and coordination rules."""

    name: str = "team"
    entry_agent: str
    pool: list[AgentScaffold] = Field(min_length=1)
    constitution: str
    organization: str = ""
    version: int = Field(default=0, ge=0)
    extra_files: dict[str, bytes] = Field(default_factory=dict, repr=False)
    root: Path | None = Field(default=None, exclude=True, repr=False)

    # raw text of each recognised file as loaded, keyed by relative path
    _sources: dict[str, str] = PrivateAttr(default_factory=dict)

    @field_validator("constitution")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("constitution is empty")
        return value

    @model_validator(mode="after")
    def _roster(self) -> "TeamScaffold":
        names = [a.name for a in self.pool]
        seen: set[str] = set()
        for name in names:
            if name in seen:
                raise DuplicateAgentName(name)
            seen.add(name)
        if self.entry_agent not in seen:
            raise ValueError(f"entry agent '{self.entry_agent}' is not in the pool")
        return self

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.pool]

    def agent(self, name: str) -> AgentScaffold:
        for agent in self.pool:
            if agent.name == name:
                return agent
        raise KeyError(name)

    def has_agent(self, name: str) -> bool:
        return name in self.names


# File codecs


class _BlockDumper(yaml.SafeDumper):
    pass


def _str_representer(dumper: yaml.SafeDumper, data: str) -> yaml.ScalarNode:
    style = "|" if "\n" in data else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", data, style=style)


_BlockDumper.add_representer(str, _str_representer)


def _dump_yaml(data: dict[str, Any]) -> str:
    return yaml.dump(
        data, Dumper=_BlockDumper, sort_keys=False, allow_unicode=True, width=1_000_000
    )


def _load_yaml(text: str, file: str) -> dict[str, Any]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ScaffoldFormatError(file, line, str(getattr(e, "problem", e))) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ScaffoldFormatError(file, 1, "expected a mapping")
    return data


def render_config(cfg: AgentConfig) -> str:
    return _dump_yaml(cfg.model_dump())


def parse_config(text: str, file: str = "config.yaml") -> AgentConfig:
    data = _load_yaml(text, file)
    try:
        return AgentConfig.model_validate(data)
    except ValidationError as e:
        raise ScaffoldFormatError(file, 1, str(e.errors()[0]["msg"])) from e


def render_patches(patches: list[BehavioralPatch]) -> str:
    return "".join(
        f"<!-- patch id={p.id} provenance={p.provenance} -->\n{p.text}\n\n" for p in patches
    )


def parse_patches(text: str, file: str = "patches.md") -> list[BehavioralPatch]:
    patches: list[BehavioralPatch] = []
    current: dict[str, Any] | None = None
    lines: list[str] = []

    def close(line_no: int) -> None:
        if current is None:
            return
        try:
            patches.append(BehavioralPatch(text="\n".join(lines), **current))
        except ValidationError as e:
            raise ScaffoldFormatError(file, line_no, str(e.errors()[0]["msg"])) from e

    for number, line in enumerate(text.split("\n"), start=1):
        match = PATCH_MARKER.match(line)
        if match:
            close(number)
            current = match.groupdict()
            lines = []
        elif current is None:
            if line.strip():
                raise ScaffoldFormatError(file, number, "text before the first patch marker")
        else:
            lines.append(line)
    close(len(text.split("\n")))
    return patches


def render_profile(profile: TeammateProfile) -> str:
    if profile.last_updated:
        return f"<!-- last_updated: {profile.last_updated} -->\n{profile.text}"
    return profile.text


def parse_profile(text: str, subject: str, cls: type[TeammateProfile] = TeammateProfile):
    first, sep, rest = text.partition("\n")
    match = UPDATED_MARKER.match(first)
    if match:
        return cls(subject=subject, text=rest, last_updated=match.group("episode"))
    return cls(subject=subject, text=text)


def render_skill(skill: Skill) -> str:
    front: dict[str, Any] = {"name": skill.name, "description": skill.description}
    if skill.tools:
        front["tools"] = list(skill.tools)
    return f"---\n{_dump_yaml(front)}---\n{skill.body}"


def parse_skill(text: str, file: str = "SKILL.md") -> Skill:
    """Parse a ``SKILL.md`` file: YAML front matter between ``---`` lines, then the body."""
    lines = text.split("\n")
    if not lines or lines[0] != "---":
        raise ScaffoldFormatError(file, 1, "missing front matter opening '---'")
    try:
        end = lines.index("---", 1)
    except ValueError:
        raise ScaffoldFormatError(file, len(lines), "unterminated front matter") from None
    front = _load_yaml("\n".join(lines[1:end]), file)
    for key in ("name", "description"):
        if key not in front:
            raise ScaffoldFormatError(file, 2, f"front matter lacks '{key}'")
    body = "\n".join(lines[end + 1 :])
    try:
        return Skill(
            name=str(front["name"]),
            description=str(front["description"]),
            body=body,
            tools=[str(t) for t in front.get("tools") or []],
        )
    except ValidationError as e:
        err = e.errors()[0]
        field = err["loc"][0] if err["loc"] else "skill"
        line = end + 2 if field == "body" else 2
        raise ScaffoldFormatError(file, line, f"{field}: {err['msg']}") from e


def render_manifest(team: TeamScaffold) -> str:
    return _dump_yaml(
        {
            "name": team.name,
            "version": team.version,
            "entry_agent": team.entry_agent,
            "pool": team.names,
            "organization": team.organization,
        }
    )


# Tree rendering


def agent_files(agent: AgentScaffold, prefix: str) -> dict[str, str]:
    """Relative path to file text for every artifact of one agent."""
    files = {
        f"{prefix}/prompt.md": agent.role_prompt,
        f"{prefix}/config.yaml": render_config(agent.config),
    }
    if agent.patches:
        files[f"{prefix}/evolution/patches.md"] = render_patches(agent.patches)
    for subject, profile in agent.profiles.items():
        files[f"{prefix}/evolution/profiles/{subject}.md"] = render_profile(profile)
    for subject, note in agent.notes.items():
        files[f"{prefix}/evolution/notes/{subject}.md"] = render_profile(note)
    for skill in agent.skills:
        files[f"{prefix}/skills/{skill.name}/SKILL.md"] = render_skill(skill)
    return files


def _parser_for(relpath: str) -> Callable[[str], Any] | None:
    if relpath.endswith("config.yaml"):
        return parse_config
    if relpath.endswith("patches.md"):
        return parse_patches
    if relpath.endswith("SKILL.md"):
        return parse_skill
    if relpath == config.TEAM_MANIFEST:
        return lambda text: _load_yaml(text, relpath)
    if "/evolution/profiles/" in relpath or "/evolution/notes/" in relpath:
        return lambda text: parse_profile(text, "")
    return None


def team_files(team: TeamScaffold) -> dict[str, bytes]:
    """Every file of the tree as bytes.

    Where a file was loaded from disk and its parsed content is unchanged,
    the original text is reused so formatting survives a round trip.
    """
    texts = {
        config.TEAM_MANIFEST: render_manifest(team),
        config.CONSTITUTION_FILE: team.constitution,
    }
    for agent in team.pool:
        texts.update(agent_files(agent, f"{config.AGENTS_DIR}/{agent.name}"))

    files: dict[str, bytes] = {}
    for relpath, text in texts.items():
        source = team._sources.get(relpath)
        parse = _parser_for(relpath)
        if source is not None and parse is not None and source != text:
            try:
                if parse(source) == parse(text):
                    text = source
            except ScaffoldFormatError:
                pass
        files[relpath] = text.encode("utf-8")
    for relpath, data in team.extra_files.items():
        files.setdefault(relpath, data)
    return files


def write_tree(team: TeamScaffold, dest: Path, fault: FaultHook | None = None) -> None:
    for relpath, data in sorted(team_files(team).items()):
        path = dest / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        if fault:
            fault(f"write:{relpath}")
        path.write_bytes(data)


# Loading


def _read(path: Path) -> str:
    return path.read_bytes().decode("utf-8")


def _load_agent(
    root: Path, name: str, sources: dict[str, str]
) -> tuple[AgentScaffold, set[str]]:
    """Load one agent dir; returns the scaffold and the relative paths it consumed."""
    prefix = f"{config.AGENTS_DIR}/{name}"
    agent_dir = root / prefix
    if not agent_dir.is_dir():
        raise MalformedAgentDir(name, "directory missing")
    used: set[str] = set()

    def take(relpath: str) -> str:
        text = _read(root / relpath)
        sources[relpath] = text
        used.add(relpath)
        return text

    try:
        for required in ("prompt.md", "config.yaml"):
            if not (agent_dir / required).is_file():
                raise MalformedAgentDir(name, f"{required} missing")
        role_prompt = take(f"{prefix}/prompt.md")
        cfg = parse_config(take(f"{prefix}/config.yaml"), f"{prefix}/config.yaml")

        patches: list[BehavioralPatch] = []
        if (agent_dir / "evolution" / "patches.md").is_file():
            rel = f"{prefix}/evolution/patches.md"
            patches = parse_patches(take(rel), rel)

        profiles: dict[str, TeammateProfile] = {}
        notes: dict[str, CollaborationNote] = {}
        for kind, target, cls in (
            ("profiles", profiles, TeammateProfile),
            ("notes", notes, CollaborationNote),
        ):
            folder = agent_dir / "evolution" / kind
            if folder.is_dir():
                for path in sorted(folder.glob("*.md")):
                    rel = f"{prefix}/evolution/{kind}/{path.name}"
                    target[path.stem] = parse_profile(take(rel), path.stem, cls)

        skills: list[Skill] = []
        skills_dir = agent_dir / "skills"
        if skills_dir.is_dir():
            for path in sorted(skills_dir.glob("*/SKILL.md")):
                rel = f"{prefix}/skills/{path.parent.name}/SKILL.md"
                skill = parse_skill(take(rel), rel)
                if skill.name != path.parent.name:
                    raise ScaffoldFormatError(rel, 2, "skill name differs from its directory")
                skills.append(skill)

        agent = AgentScaffold(
            name=name,
            role_prompt=role_prompt,
            patches=patches,
            skills=skills,
            profiles=profiles,
            notes=notes,
            config=cfg,
        )
    except ScaffoldFormatError as e:
        raise MalformedAgentDir(name, str(e)) from e
    except ValidationError as e:
        raise MalformedAgentDir(name, str(e.errors()[0]["msg"])) from e
    return agent, used


def _siblings(root: Path) -> tuple[Path, Path]:
    return root.parent / f".{root.name}.staging", root.parent / f".{root.name}.backup"


def recover(root: Path) -> None:
    """Finish or roll back an interrupted commit."""
    staging, backup = _siblings(root)
    if not root.exists() and backup.exists():
        logger.warning(f"Rolling back interrupted commit of {root}")
        backup.rename(root)
    if root.exists():
        for stale in (staging, backup):
            if stale.exists():
                shutil.rmtree(stale)


def committed_tree(root: Path) -> Path:
    """Directory holding the last committed tree of ``root``; never touches disk."""
    _, backup = _siblings(root)
    if not root.exists() and backup.exists():
        return backup
    return root


def load_team(root_path: str | Path) -> TeamScaffold:
    """Load and validate the team scaffold rooted at ``root_path``.

    Reads are side-effect free. During a commit's swap, or after a crash
    between its renames, the tree is read from the backup sibling; a read
    whose source is swapped away mid-way is retried once against the tree
    now in place.
    """
    root = Path(root_path)
    source = committed_tree(root)
    try:
        return _load_tree(source, root)
    except (OSError, ScaffoldError):
        if source.exists():
            raise
        logger.debug(f"{source} moved during read; reading {root} again")
        return _load_tree(committed_tree(root), root)


def _load_tree(root: Path, home: Path) -> TeamScaffold:
    manifest = root / config.TEAM_MANIFEST
    constitution = root / config.CONSTITUTION_FILE
    if not root.is_dir():
        raise MissingManifest(f"team root not found: {root}")
    for required in (manifest, constitution):
        if not required.is_file():
            raise MissingManifest(f"{required.name} not found in {root}")

    sources: dict[str, str] = {}
    manifest_text = _read(manifest)
    sources[config.TEAM_MANIFEST] = manifest_text
    data = _load_yaml(manifest_text, config.TEAM_MANIFEST)
    pool_names = [str(n) for n in data.get("pool") or []]
    if not pool_names:
        raise MissingManifest(f"{config.TEAM_MANIFEST} lists no agents")
    seen: set[str] = set()
    for name in pool_names:
        if name in seen:
            raise DuplicateAgentName(name)
        seen.add(name)

    used = {config.TEAM_MANIFEST, config.CONSTITUTION_FILE}
    pool: list[AgentScaffold] = []
    for name in pool_names:
        agent, consumed = _load_agent(root, name, sources)
        pool.append(agent)
        used |= consumed

    constitution_text = _read(constitution)
    sources[config.CONSTITUTION_FILE] = constitution_text

    extras: dict[str, bytes] = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            if rel not in used:
                extras[rel] = path.read_bytes()

    try:
        team = TeamScaffold(
            name=str(data.get("name", home.name)),
            entry_agent=str(data.get("entry_agent", pool_names[0])),
            pool=pool,
            constitution=constitution_text,
            organization=str(data.get("organization") or ""),
            version=int(data.get("version", 0)),
            extra_files=extras,
            root=home,
        )
    except ValidationError as e:
        raise MissingManifest(f"invalid team manifest: {e.errors()[0]['msg']}") from e
    team._sources = sources
    return team


def save_team(team: TeamScaffold, root_path: str | Path) -> None:
    """Write the team to a new (or empty) directory."""
    root = Path(root_path)
    if root.exists() and any(root.iterdir()):
        raise PersistFailure(f"refusing to save into non-empty directory {root}")
    write_tree(team, root)


# Prompt assembly


def _section(title: str, body: str) -> str:
    return f"## {title}\n\n{body.strip()}"


def render_system_prompt(agent: AgentScaffold, team: TeamScaffold, roster: list[str]) -> str:
    """Assemble an agent's system prompt.

    Order: constitution, role prompt, patches, teammate profiles, pairwise
    notes, skill index, orchestration guide. Profiles and notes are limited to
    agents on the active roster; skills show names and descriptions only.
    """
    if not team.has_agent(agent.name):
        raise KeyError(agent.name)
    parts = [_section("Team constitution", team.constitution)]
    if team.organization.strip():
        parts.append(_section("Team organization", team.organization))
    parts.append(_section("Your role", agent.role_prompt))
    if agent.patches:
        parts.append(
            _section("Behavioral patches", "\n".join(f"- {p.text}" for p in agent.patches))
        )
    teammates = [n for n in roster if n != agent.name]
    profiles = [agent.profiles[n] for n in teammates if n in agent.profiles]
    if profiles:
        parts.append(
            _section(
                "Teammate profiles",
                "\n\n".join(f"### {p.subject}\n{p.text.strip()}" for p in profiles),
            )
        )
    notes = [agent.notes[n] for n in teammates if n in agent.notes]
    if notes:
        parts.append(
            _section(
                "Collaboration notes",
                "\n\n".join(f"### {n.subject}\n{n.text.strip()}" for n in notes),
            )
        )
    if agent.skills:
        index = "\n".join(f"- {s.name}: {s.description}" for s in agent.skills)
        parts.append(_section("Skills", f"{prompts.SKILL_INDEX_PREAMBLE}\n\n{index}"))
    parts.append(_section("Orchestration primitives", prompts.ORCHESTRATION_GUIDE))
    return "\n\n".join(parts) + "\n"


def load_skill(agent: AgentScaffold, skill_name: str) -> str:
    """Full body of one skill, verbatim."""
    return agent.skill(skill_name).body


# Updates


def merge_update(
    team: TeamScaffold,
    update: "EvolutionUpdate",
    max_patches: int = config.MAX_PATCHES_PER_AGENT,
) -> TeamScaffold:
    """Pure transform: the team after ``update``, version + 1."""
    new = team.model_copy(deep=True)
    new.version = team.version + 1
    agents = {a.name: a for a in new.pool}

    # L1: patches append, skills upsert
    for name, entry in update.l1.items():
        agent = agents.get(name)
        if agent is None:
            continue
        agent.patches.extend(p.model_copy() for p in entry.patches)
        if len(agent.patches) > max_patches:
            evicted = agent.patches[: len(agent.patches) - max_patches]
            agent.patches = agent.patches[-max_patches:]
            for patch in evicted:
                logger.info(f"Evicted patch {patch.id} from {name} (cap {max_patches})")
        for edit in entry.skills:
            skill = parse_skill(edit.content, f"{name}/skills/{edit.name}/SKILL.md")
            agent.skills = [s for s in agent.skills if s.name != skill.name] + [skill]

    # L2: profiles and notes, keyed by owner
    for entry in update.l2:
        for owner, text in entry.profiles.items():
            subject = entry.other(owner)
            if owner in agents:
                agents[owner].profiles[subject] = TeammateProfile(
                    subject=subject, text=text, last_updated=update.episode_id
                )
        for owner, text in entry.notes.items():
            subject = entry.other(owner)
            if owner in agents:
                agents[owner].notes[subject] = CollaborationNote(
                    subject=subject, text=text, last_updated=update.episode_id
                )

    # L3: team-level revision
    l3 = update.l3
    if l3.constitution is not None:
        new.constitution = l3.constitution
    if l3.organization is not None:
        new.organization = l3.organization
    for name in l3.remove_agents:
        if name == new.entry_agent:
            raise ValueError(f"cannot retire the entry agent '{name}'")
        retired = agents.pop(name, None)
        if retired is None:
            continue
        target = f"{config.RETIRED_DIR}/{name}"
        if any(k.startswith(target + "/") for k in new.extra_files):
            target = f"{target}-v{new.version}"
        for relpath, text in agent_files(retired, target).items():
            new.extra_files[relpath] = text.encode("utf-8")
        for other in agents.values():
            other.profiles.pop(name, None)
            other.notes.pop(name, None)
        logger.info(f"Retired agent {name} to {target}")
    entry_backbone = agents[new.entry_agent].config.backbone
    for spec in l3.add_agents:
        agents[spec.name] = AgentScaffold(
            name=spec.name,
            role_prompt=spec.role_prompt
            or prompts.NEW_AGENT_ROLE.format(name=spec.name, role=spec.role or spec.name),
            config=AgentConfig(
                backbone=spec.backbone or entry_backbone,
                allowed_tools=list(spec.allowed_tools or prompts.DEFAULT_AGENT_TOOLS),
            ),
        )
    new.pool = list(agents.values())
    return _revalidate(new)


def _revalidate(team: TeamScaffold) -> TeamScaffold:
    sources = team._sources
    checked = TeamScaffold(
        name=team.name,
        entry_agent=team.entry_agent,
        pool=team.pool,
        constitution=team.constitution,
        organization=team.organization,
        version=team.version,
        extra_files=team.extra_files,
        root=team.root,
    )
    checked._sources = sources
    return checked


def persist(team: TeamScaffold, root: Path, fault: FaultHook | None = None) -> None:
    """Atomically replace the tree at ``root`` with ``team``."""
    staging, backup = _siblings(root)
    recover(root)
    if staging.exists():
        shutil.rmtree(staging)
    try:
        staging.mkdir(parents=True)
        write_tree(team, staging, fault)
        if fault:
            fault("swap:begin")
        root.rename(backup)
        if fault:
            fault("swap:middle")
        staging.rename(root)
        if fault:
            fault("swap:end")
        shutil.rmtree(backup)
    except Exception as e:
        if not root.exists() and backup.exists():
            backup.rename(root)
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)
        raise PersistFailure(f"could not commit {root}: {e}") from e


def apply_update(
    team: TeamScaffold,
    update: "EvolutionUpdate",
    max_patches: int = config.MAX_PATCHES_PER_AGENT,
    fault: FaultHook | None = None,
) -> TeamScaffold:
    """Merge ``update`` into ``team`` and persist it atomically at ``team.root``."""
    if team.root is None:
        raise PersistFailure("team has no root directory to commit into")
    new = merge_update(team, update, max_patches)
    persist(new, team.root, fault)
    committed = load_team(team.root)
    logger.info(f"Committed {team.name} version {committed.version} ({update.episode_id})")
    return committed


class ScaffoldStore:
    """Serializes commits to one team root; snapshots are consistent reads."""

    def __init__(
        self,
        root: str | Path,
        max_patches: int = config.MAX_PATCHES_PER_AGENT,
        fault: FaultHook | None = None,
    ):
        self.root = Path(root)
        self.max_patches = max_patches
        self.fault = fault
        self._lock = threading.Lock()
        with self._lock:
            recover(self.root)

    def snapshot(self) -> TeamScaffold:
        with self._lock:
            return load_team(self.root)

    def commit(self, update: "EvolutionUpdate") -> TeamScaffold:
        with self._lock:
            team = load_team(self.root)
            return apply_update(team, update, self.max_patches, self.fault)
