"""Type definitions shared by the runtime, trace store and attribution engine."""

from datetime import datetime
from decimal import Decimal
from enum import Enum
from typing import Annotated, Any, Literal

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, model_validator

from . import config

SYSTEM_ACTOR = "system"
MICRO = Decimal("0.000001")


class FrozenPayload(dict):
    """Read-only dict for recorded event payloads."""

    def _read_only(self, *args: Any, **kwargs: Any) -> Any:
        raise TypeError("recorded event payloads are read-only")

    __setitem__ = __delitem__ = __ior__ = _read_only
    clear = pop = popitem = setdefault = update = _read_only

    def __reduce__(self):
        return (FrozenPayload, (dict(self),))


def freeze_value(value: Any) -> Any:
    """Recursively turn dicts into ``FrozenPayload`` and lists into tuples."""
    if isinstance(value, dict):
        return FrozenPayload({k: freeze_value(v) for k, v in value.items()})
    if isinstance(value, list | tuple):
        return tuple(freeze_value(v) for v in value)
    return value


Payload = Annotated[dict[str, Any], AfterValidator(freeze_value)]


class EventKind(str, Enum):
    """What a bus entry records."""

    MESSAGE = "message"
    TOOL_CALL = "tool_call"
    TOOL_RESULT = "tool_result"
    LIFECYCLE = "lifecycle"
    MODEL_CALL = "model_call"
    MODEL_RESULT = "model_result"


class EndReason(str, Enum):
    """Why an episode ended."""

    FINALIZE = "finalize"
    TERMINATE = "terminate"
    SECONDS = "seconds"
    MESSAGES = "messages"
    COST = "cost"
    STALLED = "stalled"

    @property
    def forced(self) -> bool:
        return self not in (EndReason.FINALIZE, EndReason.TERMINATE)


class BusEvent(BaseModel):
    """One append-only bus entry."""

    seq: int = Field(ge=0)
    timestamp: datetime = Field(alias="ts")
    kind: EventKind
    actor: str
    recipient: str | None = None
    payload: Payload = Field(default_factory=FrozenPayload)
    cost: Decimal = Field(default=Decimal("0"), ge=0)

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    def involves(self, agent: str) -> bool:
        """Whether this event belongs to ``agent``'s local trace."""
        if self.actor == agent:
            return True
        if self.kind is EventKind.MESSAGE and self.recipient == agent:
            return True
        return self.kind is EventKind.LIFECYCLE and self.payload.get("agent") == agent

    def to_record(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


class Budget(BaseModel):
    """Per-episode limits and running totals."""

    max_seconds: float = Field(gt=0)
    max_messages: int = Field(gt=0)
    max_cost: Decimal = Field(gt=0)
    spent_seconds: float = Field(default=0.0, ge=0)
    spent_messages: int = Field(default=0, ge=0)
    spent_cost: Decimal = Field(default=Decimal("0"), ge=0)
    exhausted: EndReason | None = None

    def crossed(self) -> EndReason | None:
        """First limit reached, checked in seconds, messages, cost order."""
        if self.spent_seconds >= self.max_seconds:
            return EndReason.SECONDS
        if self.spent_messages >= self.max_messages:
            return EndReason.MESSAGES
        if self.spent_cost >= self.max_cost:
            return EndReason.COST
        return None

    @property
    def remaining_cost(self) -> Decimal:
        return max(Decimal("0"), self.max_cost - self.spent_cost)

    def scaled(self, factor: float) -> "Budget":
        """Fresh budget with every limit multiplied by ``factor``."""
        f = Decimal(str(factor))
        return Budget(
            max_seconds=self.max_seconds * factor,
            max_messages=max(1, int(self.max_messages * factor)),
            max_cost=(self.max_cost * f).quantize(MICRO),
        )


class Task(BaseModel):
    """One task given to the team."""

    id: str
    input: str
    attachments: tuple[str, ...] = ()
    expected: str | None = None

    model_config = ConfigDict(frozen=True)


class Score(BaseModel):
    value: float
    passed: bool


class TaskOutcome(BaseModel):
    """Evaluated result of one episode."""

    deliverable: str
    score: float | None = None
    passed: bool = False
    finalized_by: str
    reason: EndReason = EndReason.FINALIZE

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _system_iff_forced(self) -> "TaskOutcome":
        if (self.finalized_by == SYSTEM_ACTOR) != self.reason.forced:
            raise ValueError("finalized_by is 'system' exactly when the episode was forced")
        return self


# Model gateway wire types


class ToolCall(BaseModel):
    id: str
    name: str
    arguments: dict[str, Any] = Field(default_factory=dict)


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: str = ""
    tool_calls: list[ToolCall] = Field(default_factory=list)
    tool_call_id: str | None = None


class ToolSchema(BaseModel):
    name: str
    description: str
    parameters: dict[str, Any] = Field(default_factory=lambda: {"type": "object", "properties": {}})


class Usage(BaseModel):
    input_tokens: int = Field(default=0, ge=0)
    output_tokens: int = Field(default=0, ge=0)


class ChatRequest(BaseModel):
    """One model call. ``agent``/``step`` identify the caller for scripted backends."""

    model: str = config.DEFAULT_MODEL
    messages: list[ChatMessage]
    tool_schemas: list[ToolSchema] | None = None
    temperature: float = Field(default=config.DEFAULT_TEMPERATURE, ge=0, le=2)
    max_output_tokens: int = Field(default=config.DEFAULT_MAX_OUTPUT_TOKENS, gt=0)
    agent: str = ""
    step: int = 0

    @property
    def system_prompt(self) -> str:
        return "\n".join(m.content for m in self.messages if m.role == "system")

    @property
    def tools_enabled(self) -> bool:
        return bool(self.tool_schemas)


class ChatResponse(BaseModel):
    text: str = ""
    tool_calls: list[ToolCall] = Field(default_factory=list)
    usage: Usage = Field(default_factory=Usage)
    model: str = ""
    cost: Decimal = Field(default=Decimal("0"), ge=0)


# Trace types


class StepRecord(BaseModel):
    """One step: who acted, on what input, producing what output."""

    index: int = Field(ge=1)
    agent: str
    input: str
    output: str


class Trajectory(BaseModel):
    """Seq-ordered interleaving of every agent's events."""

    events: tuple[BusEvent, ...]
    agents: tuple[str, ...]

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _ordered_and_complete(self) -> "Trajectory":
        seqs = [e.seq for e in self.events]
        if seqs != sorted(seqs):
            raise ValueError("trajectory events must be ordered by seq")
        actors = {e.actor for e in self.events if e.actor != SYSTEM_ACTOR}
        if actors != set(self.agents):
            raise ValueError("agents must be exactly the non-system actors")
        return self


class LocalTrace(BaseModel):
    """Projection of a trajectory onto one agent."""

    agent: str
    events: tuple[BusEvent, ...]

    model_config = ConfigDict(frozen=True)


class Experience(BaseModel):
    """Frozen (task, trajectory, outcome) record of one episode."""

    episode_id: str
    team_version: int = Field(ge=0)
    task: Task
    trajectory: Trajectory
    outcome: TaskOutcome
    retry_of: str | None = None

    model_config = ConfigDict(frozen=True)

    @property
    def total_cost(self) -> Decimal:
        return sum((e.cost for e in self.trajectory.events), Decimal("0"))


class AnnotatedTrace(BaseModel):
    """Imported multi-agent trace with its ground-truth failure."""

    trace_id: str
    steps: list[StepRecord] = Field(min_length=1)
    mistake_agent: str
    mistake_step: int = Field(ge=1)
    token_estimate: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _ground_truth_exists(self) -> "AnnotatedTrace":
        if self.mistake_step > len(self.steps):
            raise ValueError(
                f"mistake_step {self.mistake_step} beyond last step {len(self.steps)}"
            )
        if self.mistake_agent not in self.agents:
            raise ValueError(f"mistake_agent '{self.mistake_agent}' never acts in the trace")
        return self

    @property
    def agents(self) -> list[str]:
        return list(dict.fromkeys(s.agent for s in self.steps))

    @property
    def bucket(self) -> str:
        return "<=128K" if self.token_estimate <= config.LONG_TRACE_TOKEN_THRESHOLD else ">128K"


# Attribution types


class Submission(BaseModel):
    """One analyzer's claim about its own sub-trace."""

    analyzer: str
    i_erred: bool
    my_step: int | None = Field(default=None, ge=1)
    confidence: float = Field(ge=0.0, le=1.0)
    disagree: bool = False
    summary: str = ""

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _step_when_accusing(self) -> "Submission":
        if self.i_erred and self.my_step is None:
            raise ValueError("an accusing submission needs my_step")
        return self


class Verdict(BaseModel):
    """Aggregated (mistake_agent, mistake_step) decision."""

    mistake_agent: str
    mistake_step: int = Field(ge=1)
    scheme: str = ""
    fallback: bool = False
    audit: dict[str, Any] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True)

    @property
    def pair(self) -> tuple[str, int]:
        return (self.mistake_agent, self.mistake_step)
