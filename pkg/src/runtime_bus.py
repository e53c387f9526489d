"""Episode runtime: open-roster agent loops around an append-only message bus.

One ``Episode`` owns the bus, the mailboxes and the roster. Every model call,
tool call, tool result, message and lifecycle change becomes a ``BusEvent``
with the next sequence number. Agent loops run as asyncio tasks; the
controller watches the budget and ends the episode on ``finalize``,
``terminate``, budget exhaustion or a stalled roster.
"""

import asyncio
import hashlib
import json
import logging
from decimal import Decimal
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, Field, model_validator

from . import config, prompts
from .clock import Clock, SystemClock
from .errors import (
    AlreadyActive,
    AlreadyFinalized,
    BudgetExhausted,
    GatewayError,
    MalformedHistory,
    MetaTeamError,
    NotActive,
    UnknownAgent,
    UnknownBudgetProfile,
    UnknownRecipient,
    UnknownTool,
)
from .evaluators import Evaluator, evaluate
from .model_gateway import ModelGateway
from .scaffold_store import TeamScaffold, render_system_prompt
from .tools import ToolRegistry
from .trace_store import freeze
from .types import (
    SYSTEM_ACTOR,
    Budget,
    BusEvent,
    ChatMessage,
    ChatRequest,
    EndReason,
    EventKind,
    Experience,
    Task,
    TaskOutcome,
    ToolCall,
)

logger = logging.getLogger(__name__)


class RosterState(BaseModel):
    active: list[str] = Field(default_factory=list)
    stopped: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _disjoint(self) -> "RosterState":
        if set(self.active) & set(self.stopped):
            raise ValueError("an agent cannot be both active and stopped")
        return self


# Budget


def charge(budget: Budget, event: BusEvent) -> Budget:
    """Budget after recording ``event``; flags the first limit crossed."""
    if event.cost < 0:
        raise ValueError("event cost must be >= 0")
    spent_messages = budget.spent_messages + (1 if event.kind is EventKind.MESSAGE else 0)
    updated = budget.model_copy(
        update={"spent_cost": budget.spent_cost + event.cost, "spent_messages": spent_messages}
    )
    if updated.exhausted is None:
        updated.exhausted = updated.crossed()
    return updated


def budget_profiles(path: str | Path = config.BUDGET_PROFILES_PATH) -> dict[str, dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_budget_profile(name: str, path: str | Path = config.BUDGET_PROFILES_PATH) -> Budget:
    """Budget limits for a named benchmark profile."""
    profiles = budget_profiles(path)
    if name not in profiles:
        raise UnknownBudgetProfile(name, sorted(profiles))
    row = profiles[name]
    return Budget(
        max_seconds=float(row["max_seconds"]),
        max_messages=int(row["max_messages"]),
        max_cost=Decimal(str(row["max_cost"])),
    )


# Conversation history


def _history_units(messages: list[ChatMessage]) -> list[list[ChatMessage]]:
    """Group a conversation so each tool call travels with its results."""
    units: list[list[ChatMessage]] = []
    open_calls: set[str] = set()
    for message in messages:
        if message.role == "tool":
            if message.tool_call_id not in open_calls:
                raise MalformedHistory(f"tool result {message.tool_call_id!r} has no tool call")
            open_calls.discard(message.tool_call_id)
            units[-1].append(message)
            continue
        open_calls = {c.id for c in message.tool_calls}
        units.append([message])
    return units


def trim_history(
    messages: list[ChatMessage], cap: int = config.MAX_HISTORY_MESSAGES
) -> list[ChatMessage]:
    """Drop the oldest entries until at most ``cap`` remain.

    A leading system message is always kept, and an assistant tool call is
    dropped or kept together with its tool results.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    head: list[ChatMessage] = []
    body = list(messages)
    if body and body[0].role == "system":
        head, body = body[:1], body[1:]
    units = _history_units(body)
    if len(messages) <= cap:
        return list(messages)
    room = cap - len(head)
    kept: list[list[ChatMessage]] = []
    size = 0
    for unit in reversed(units):
        if size + len(unit) > room:
            break
        kept.append(unit)
        size += len(unit)
    return head + [m for unit in reversed(kept) for m in unit]


def request_digest(messages: list[ChatMessage]) -> str:
    """SHA-256 of the exact request messages."""
    data = json.dumps(
        [m.model_dump(mode="json") for m in messages], sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(data.encode("utf-8")).hexdigest()


def _incoming(event: BusEvent) -> ChatMessage:
    body = event.payload["body"]
    return ChatMessage(role="user", content=f"[message from {event.actor}]\n{body}")


# Episode


class Episode:
    """Bus, mailboxes and roster for one task.

    Appends happen on the event-loop thread inside synchronous methods, so
    the bus is totally ordered without further locking.
    """

    def __init__(
        self,
        team: TeamScaffold,
        task: Task,
        budget: Budget,
        gateway: ModelGateway | None = None,
        clock: Clock | None = None,
        tools: ToolRegistry | None = None,
        step_budget: int = config.PHASE_STEP_BUDGET,
        poll_seconds: float = config.MAILBOX_POLL_SECONDS,
        force_timeout: float = config.FORCE_FINALIZE_TIMEOUT_SECONDS,
        stall_polls: int = config.STALL_POLLS,
        history_cap: int = config.MAX_HISTORY_MESSAGES,
    ):
        self.team = team
        self.task = task
        self.budget = budget
        self.gateway = gateway
        self.clock = clock or SystemClock()
        self.tools = tools or ToolRegistry()
        self.step_budget = step_budget
        self.poll_seconds = poll_seconds
        self.force_timeout = force_timeout
        self.stall_polls = stall_polls
        self.history_cap = history_cap

        self.events: list[BusEvent] = []
        self.mailboxes: dict[str, asyncio.Queue[BusEvent]] = {
            name: asyncio.Queue() for name in team.names
        }
        self._active: dict[str, None] = {}  # insertion order = start order
        self._stopped: set[str] = set()
        self._idle: set[str] = set()
        self._histories: dict[str, list[ChatMessage]] = {}
        self._steps: dict[str, int] = {name: 0 for name in team.names}
        self._loops: dict[str, asyncio.Task] = {}
        self._halt = asyncio.Event()
        self._started = self.clock.now()
        self._running = False
        self._forcing = False
        self._failure: BaseException | None = None

        self.deliverable: str | None = None
        self.finalized_by: str | None = None
        self.end_reason: EndReason | None = None

    # bus

    def append(
        self,
        kind: EventKind,
        actor: str,
        payload: dict[str, Any] | None = None,
        recipient: str | None = None,
        cost: Decimal = Decimal("0"),
    ) -> BusEvent:
        event = BusEvent(
            seq=len(self.events),
            ts=self.clock.wall(),
            kind=kind,
            actor=actor,
            recipient=recipient,
            payload=payload or {},
            cost=cost,
        )
        self.events.append(event)
        self.budget = charge(self.budget, event)
        self._tick()
        return event

    def _tick(self) -> None:
        self.budget.spent_seconds = max(self.budget.spent_seconds, self.clock.now() - self._started)
        if self.budget.exhausted is None:
            self.budget.exhausted = self.budget.crossed()
        if self.budget.exhausted is not None and self.end_reason is None:
            logger.info(f"Budget exhausted ({self.budget.exhausted.value}); halting agents")
            self.end_reason = self.budget.exhausted
            self._halt.set()

    @property
    def halted(self) -> bool:
        return self._halt.is_set()

    @property
    def roster(self) -> RosterState:
        return RosterState(active=list(self._active), stopped=sorted(self._stopped))

    def is_active(self, name: str) -> bool:
        return name in self._active

    def _require_active(self, name: str) -> None:
        if name != SYSTEM_ACTOR and name not in self._active:
            raise NotActive(name)

    def _require_open(self) -> None:
        if self.end_reason is not None and self.end_reason.forced:
            raise BudgetExhausted(f"episode budget exhausted ({self.end_reason.value})")
        if self.end_reason is not None:
            raise AlreadyFinalized(f"episode already ended by {self.finalized_by}")

    # orchestration primitives

    def roster_text(self) -> str:
        lines = []
        for agent in self.team.pool:
            status = "active" if agent.name in self._active else "inactive"
            lines.append(f"- {agent.name} [{status}]: {agent.role_summary}")
        return "\n".join(lines)

    def list_pool(self, caller: str) -> str:
        self._require_active(caller)
        text = self.roster_text()
        self.append(EventKind.LIFECYCLE, caller, {"op": "list_pool", "agent": caller})
        return text

    def start_agent(self, caller: str, name: str, brief: str) -> str:
        self._require_active(caller)
        if not self.team.has_agent(name):
            raise UnknownAgent(name)
        if name in self._active:
            raise AlreadyActive(name)
        self._require_open()
        self._stopped.discard(name)
        self._active[name] = None
        self.append(EventKind.LIFECYCLE, caller, {"op": "start", "agent": name})
        self._deliver(caller, name, brief)
        if self._running:
            self._spawn(name)
        logger.debug(f"{caller} started {name}")
        return f"started {name}"

    def stop_agent(self, caller: str, name: str) -> str:
        self._require_active(caller)
        if not self.team.has_agent(name):
            raise UnknownAgent(name)
        if name not in self._active:
            raise NotActive(name)
        del self._active[name]
        self._stopped.add(name)
        self.append(EventKind.LIFECYCLE, caller, {"op": "stop", "agent": name})
        logger.debug(f"{caller} stopped {name}")
        return f"stopped {name}"

    def send_message(self, sender: str, recipient: str, body: str) -> int:
        self._require_active(sender)
        if not self.team.has_agent(recipient):
            raise UnknownRecipient(recipient)
        self._require_open()
        return self._deliver(sender, recipient, body).seq

    def _deliver(self, sender: str, recipient: str, body: str) -> BusEvent:
        event = self.append(EventKind.MESSAGE, sender, {"body": body}, recipient=recipient)
        self.mailboxes[recipient].put_nowait(event)
        return event

    def finalize(self, caller: str, deliverable: str) -> str:
        self._require_active(caller)
        self._require_open()
        self.append(
            EventKind.LIFECYCLE,
            caller,
            {"op": "finalize", "agent": caller, "deliverable": deliverable},
        )
        self.deliverable = deliverable
        self.finalized_by = caller
        self.end_reason = EndReason.FINALIZE
        self._halt.set()
        logger.info(f"{caller} finalized the episode")
        return "finalized"

    def terminate(self, caller: str, reason: str = "") -> str:
        self._require_active(caller)
        self._require_open()
        self.append(
            EventKind.LIFECYCLE, caller, {"op": "terminate", "agent": caller, "reason": reason}
        )
        self.deliverable = ""
        self.finalized_by = caller
        self.end_reason = EndReason.TERMINATE
        self._halt.set()
        logger.info(f"{caller} terminated the episode: {reason}")
        return "terminated"

    def drain(self, name: str) -> list[BusEvent]:
        """Every queued message for ``name``, in delivery order."""
        box = self.mailboxes[name]
        items = []
        while not box.empty():
            items.append(box.get_nowait())
        return items

    async def poll(self, name: str, timeout: float | None = None) -> BusEvent | None:
        """Next message for ``name``, or None once the poll deadline passes."""
        return await self.clock.wait_for(
            self.mailboxes[name].get(), self.poll_seconds if timeout is None else timeout
        )

    # agent loops

    def _history(self, name: str) -> list[ChatMessage]:
        if name not in self._histories:
            agent = self.team.agent(name)
            system = render_system_prompt(agent, self.team, list(self._active))
            self._histories[name] = [ChatMessage(role="system", content=system)]
        return self._histories[name]

    def _spawn(self, name: str) -> None:
        # A stopped agent whose loop has not yet exited picks up again in that
        # same loop; each mailbox keeps a single consumer.
        current = self._loops.get(name)
        if current is not None and not current.done():
            logger.debug(f"{name} restarted inside its running loop")
            return
        self._loops[name] = asyncio.ensure_future(self._agent_loop(name))

    async def _agent_loop(self, name: str) -> None:
        phase_steps = 0
        busy = False
        try:
            while not self.halted and name in self._active:
                mail = self.drain(name)
                if mail:
                    self._history(name).extend(_incoming(e) for e in mail)
                    phase_steps, busy = 0, True
                if busy and phase_steps < self.step_budget:
                    busy = await self._step(name)
                    phase_steps += 1
                    if busy and phase_steps >= self.step_budget:
                        logger.warning(f"{name} used its {self.step_budget}-step phase budget")
                    await asyncio.sleep(0)
                    continue
                self._idle.add(name)
                try:
                    event = await self.poll(name)
                finally:
                    self._idle.discard(name)
                if event is not None:
                    self._history(name).append(_incoming(event))
                    phase_steps, busy = 0, True
        except GatewayError as e:
            logger.error(f"{name} aborted the episode: {e}")
            self._failure = e
            self._halt.set()
        except Exception as e:
            logger.exception(f"{name} loop crashed")
            self._failure = e
            self._halt.set()

    async def _step(self, name: str) -> bool:
        """One model call plus its tool calls; True when tools were called."""
        if self._forcing:
            raise RuntimeError("no tool-enabled steps once force-finalize has begun")
        agent = self.team.agent(name)
        history = self._history(name)
        history[:] = trim_history(history, self.history_cap)
        self._steps[name] += 1
        step = self._steps[name]
        request = ChatRequest(
            model=agent.config.backbone,
            messages=list(history),
            tool_schemas=self.tools.schemas_for(agent.config.allowed_tools),
            temperature=agent.config.temperature,
            max_output_tokens=agent.config.max_output_tokens,
            agent=name,
            step=step,
        )
        self.append(
            EventKind.MODEL_CALL,
            name,
            {"step": step, "digest": request_digest(request.messages), "tools": True},
        )
        response = await self.gateway.complete(request)
        self.append(
            EventKind.MODEL_RESULT,
            name,
            {
                "step": step,
                "text": response.text,
                "tool_calls": [c.model_dump(mode="json") for c in response.tool_calls],
                "usage": response.usage.model_dump(),
            },
            cost=response.cost,
        )
        history.append(
            ChatMessage(role="assistant", content=response.text, tool_calls=response.tool_calls)
        )
        allowed = set(self.tools.allowed(agent.config.allowed_tools))
        for call in response.tool_calls:
            self.append(
                EventKind.TOOL_CALL,
                name,
                {"step": step, "id": call.id, "name": call.name, "arguments": call.arguments},
            )
            result = await self._invoke(name, call, allowed)
            self.append(
                EventKind.TOOL_RESULT,
                name,
                {"step": step, "id": call.id, "name": call.name, **result},
            )
            history.append(
                ChatMessage(
                    role="tool",
                    content=json.dumps(result, sort_keys=True, default=str),
                    tool_call_id=call.id,
                )
            )
        return bool(response.tool_calls)

    async def _invoke(self, caller: str, call: ToolCall, allowed: set[str]) -> dict[str, Any]:
        args = call.arguments
        try:
            if call.name not in allowed:
                raise UnknownTool(call.name)
            match call.name:
                case "send_message":
                    output: Any = self.send_message(caller, args["recipient"], args["body"])
                case "list_pool":
                    output = self.list_pool(caller)
                case "start_agent":
                    output = self.start_agent(caller, args["name"], args.get("brief", ""))
                case "stop_agent":
                    output = self.stop_agent(caller, args["name"])
                case "finalize":
                    output = self.finalize(caller, args.get("deliverable", ""))
                case "terminate":
                    output = self.terminate(caller, args.get("reason", ""))
                case "load_skill":
                    output = self.team.agent(caller).skill(args["name"]).body
                case _:
                    output = await self.tools.call(call.name, caller, args)
        except MetaTeamError as e:
            return {"error": str(e), "type": type(e).__name__}
        except KeyError as e:
            return {"error": f"missing argument {e}", "type": "InvalidArguments"}
        except Exception as e:
            logger.warning(f"Tool {call.name} failed for {caller}: {e}")
            return {"error": str(e), "type": type(e).__name__}
        return {"result": output}

    # controller

    async def run(self) -> None:
        """Run until the episode ends; leaves the outcome on the episode."""
        self._running = True
        self._started = self.clock.now()
        logger.info(
            f"Episode start: task {self.task.id}, team {self.team.name} v{self.team.version}"
        )
        attachments = "".join(f"- {a}\n" for a in self.task.attachments)
        brief = prompts.TASK_BRIEF.format(
            task_id=self.task.id,
            task=self.task.input,
            attachments=f"\nAttachments:\n{attachments}" if attachments else "",
            roster=self.roster_text(),
        )
        self.start_agent(SYSTEM_ACTOR, self.team.entry_agent, brief)

        stalled = 0
        while not self.halted:
            await self.clock.wait_for(self._halt.wait(), self.poll_seconds)
            self._tick()
            if self.halted:
                break
            quiet = all(
                name in self._idle and self.mailboxes[name].empty() for name in self._active
            )
            stalled = stalled + 1 if quiet else 0
            if stalled >= self.stall_polls:
                logger.warning(f"Roster stalled for {stalled} polls")
                self.end_reason = EndReason.STALLED
                self._halt.set()

        await self._join_loops()
        if self._failure is not None:
            raise self._failure
        if self.end_reason is not None and self.end_reason.forced:
            await self.force_finalize(self.end_reason)

    async def _join_loops(self) -> None:
        while True:
            pending = [t for t in self._loops.values() if not t.done()]
            if not pending:
                return
            await asyncio.gather(*pending, return_exceptions=True)

    async def force_finalize(self, reason: EndReason) -> str:
        """One tool-free best-effort call per active agent; the entry agent's reply wins."""
        self._forcing = True
        self._halt.set()
        await self._join_loops()
        active = list(self._active)
        logger.info(f"Force-finalize ({reason.value}) with {len(active)} active agents")
        self.append(
            EventKind.LIFECYCLE,
            SYSTEM_ACTOR,
            {"op": "force_finalize", "reason": reason.value, "agents": active},
        )
        replies = await asyncio.gather(*(self._final_call(name, reason) for name in active))
        by_agent = dict(zip(active, replies, strict=True))
        if self.team.entry_agent in by_agent:
            deliverable = by_agent[self.team.entry_agent]
        else:
            deliverable = replies[0] if replies else ""
        self.append(
            EventKind.LIFECYCLE,
            SYSTEM_ACTOR,
            {"op": "finalize", "reason": reason.value, "deliverable": deliverable},
        )
        self.deliverable = deliverable
        self.finalized_by = SYSTEM_ACTOR
        self.end_reason = reason
        return deliverable

    async def _final_call(self, name: str, reason: EndReason) -> str:
        agent = self.team.agent(name)
        history = self._history(name)
        history.extend(_incoming(e) for e in self.drain(name))
        history.append(
            ChatMessage(role="user", content=prompts.FORCE_FINALIZE.format(reason=reason.value))
        )
        history[:] = trim_history(history, self.history_cap)
        self._steps[name] += 1
        step = self._steps[name]
        request = ChatRequest(
            model=agent.config.backbone,
            messages=list(history),
            tool_schemas=None,
            temperature=agent.config.temperature,
            max_output_tokens=agent.config.max_output_tokens,
            agent=name,
            step=step,
        )
        self.append(
            EventKind.MODEL_CALL,
            name,
            {"step": step, "digest": request_digest(request.messages), "tools": False},
        )
        try:
            response = await self.clock.wait_for(self.gateway.complete(request), self.force_timeout)
        except GatewayError as e:
            self.append(
                EventKind.LIFECYCLE,
                SYSTEM_ACTOR,
                {"op": "force_finalize_failed", "agent": name, "error": str(e)},
            )
            return ""
        if response is None:
            self.append(
                EventKind.LIFECYCLE,
                SYSTEM_ACTOR,
                {"op": "force_finalize_timeout", "agent": name},
            )
            return ""
        self.append(
            EventKind.MODEL_RESULT,
            name,
            {
                "step": step,
                "text": response.text,
                "tool_calls": [],
                "usage": response.usage.model_dump(),
            },
            cost=response.cost,
        )
        history.append(ChatMessage(role="assistant", content=response.text))
        return response.text


async def run_task(
    team: TeamScaffold,
    task: Task,
    budget: Budget,
    gateway: ModelGateway,
    evaluator: Evaluator,
    clock: Clock | None = None,
    tools: ToolRegistry | None = None,
    episode_id: str | None = None,
    retry_of: str | None = None,
    **episode_options: Any,
) -> Experience:
    """Run one episode and freeze its experience."""
    episode = Episode(team, task, budget, gateway, clock, tools, **episode_options)
    await episode.run()
    reason = episode.end_reason or EndReason.FINALIZE
    deliverable = episode.deliverable or ""
    if reason is EndReason.TERMINATE:
        score, passed = 0.0, False
    else:
        result = await evaluate(evaluator, task, deliverable)
        score, passed = result.value, result.passed
    outcome = TaskOutcome(
        deliverable=deliverable,
        score=score,
        passed=passed,
        finalized_by=episode.finalized_by or SYSTEM_ACTOR,
        reason=reason,
    )
    experience = freeze(
        episode.events,
        task,
        outcome,
        episode_id=episode_id or f"{task.id}-v{team.version}",
        team_version=team.version,
        retry_of=retry_of,
    )
    logger.info(
        f"Episode {experience.episode_id} ended ({reason.value}); "
        f"passed={passed}, cost={experience.total_cost}"
    )
    return experience
