"""Evolution update records produced by reflection and consumed by the store."""

from decimal import Decimal

from pydantic import BaseModel, Field, model_validator

from .scaffold_store import BehavioralPatch


class SkillEdit(BaseModel):
    """New or replaced skill, carried as the full ``SKILL.md`` text."""

    name: str
    content: str


class L1Entry(BaseModel):
    """Agent-level result: patches, skill edits and the summary u for L3."""

    patches: list[BehavioralPatch] = Field(default_factory=list)
    skills: list[SkillEdit] = Field(default_factory=list)
    summary: str
    flagged: list[str] = Field(default_factory=list)
    note: str | None = None

    @property
    def is_empty(self) -> bool:
        return not self.patches and not self.skills


class L2Entry(BaseModel):
    """Interaction-level edits for one pair; dicts are keyed by the owning agent."""

    pair: tuple[str, str]
    profiles: dict[str, str] = Field(default_factory=dict)
    notes: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _owners_in_pair(self) -> "L2Entry":
        if self.pair[0] == self.pair[1]:
            raise ValueError("a pair needs two distinct agents")
        for owner in (*self.profiles, *self.notes):
            if owner not in self.pair:
                raise ValueError(f"'{owner}' is not part of pair {self.pair}")
        return self

    def other(self, owner: str) -> str:
        a, b = self.pair
        return b if owner == a else a

    @property
    def is_empty(self) -> bool:
        return not self.profiles and not self.notes


class NewAgent(BaseModel):
    name: str
    role: str = ""
    role_prompt: str = ""
    backbone: str | None = None
    allowed_tools: list[str] | None = None


class L3Revision(BaseModel):
    """Team-level changes to constitution, organization and pool."""

    constitution: str | None = None
    organization: str | None = None
    add_agents: list[NewAgent] = Field(default_factory=list)
    remove_agents: list[str] = Field(default_factory=list)
    retry_requested: bool = False
    rationale: str = ""

    @property
    def is_empty(self) -> bool:
        return (
            self.constitution is None
            and self.organization is None
            and not self.add_agents
            and not self.remove_agents
        )


class EvolutionUpdate(BaseModel):
    """Everything one episode's reflection wants to change."""

    episode_id: str
    l1: dict[str, L1Entry] = Field(default_factory=dict)
    l2: list[L2Entry] = Field(default_factory=list)
    l3: L3Revision = Field(default_factory=L3Revision)
    costs: dict[str, Decimal] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _summaries(self) -> "EvolutionUpdate":
        for agent, entry in self.l1.items():
            if not entry.summary.strip():
                raise ValueError(f"L1 entry for '{agent}' has no summary")
        return self

    @property
    def is_empty(self) -> bool:
        return (
            all(e.is_empty for e in self.l1.values())
            and all(e.is_empty for e in self.l2)
            and self.l3.is_empty
        )

    @property
    def total_cost(self) -> Decimal:
        return sum(self.costs.values(), Decimal("0"))

    def touched_agents(self) -> set[str]:
        names = {a for a, e in self.l1.items() if not e.is_empty}
        for entry in self.l2:
            names |= set(entry.profiles) | set(entry.notes)
        return names
