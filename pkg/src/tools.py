"""Tool registry: built-in orchestration primitives plus caller-supplied tools."""

import inspect
import logging
from collections.abc import Awaitable, Callable
from typing import Any

from .errors import UnknownTool
from .prompts import DEFAULT_AGENT_TOOLS
from .types import ToolSchema

logger = logging.getLogger(__name__)

ToolHandler = Callable[[str, dict[str, Any]], Any | Awaitable[Any]]


def _object(properties: dict[str, dict[str, Any]], required: list[str]) -> dict[str, Any]:
    return {"type": "object", "properties": properties, "required": required}


_STRING = {"type": "string"}

BUILTIN_SCHEMAS: dict[str, ToolSchema] = {
    "send_message": ToolSchema(
        name="send_message",
        description="Deliver a message to one teammate's mailbox.",
        parameters=_object({"recipient": _STRING, "body": _STRING}, ["recipient", "body"]),
    ),
    "list_pool": ToolSchema(
        name="list_pool",
        description="List every pool agent with its role and active status.",
        parameters=_object({}, []),
    ),
    "start_agent": ToolSchema(
        name="start_agent",
        description="Recruit an inactive pool agent; the brief becomes its first message.",
        parameters=_object({"name": _STRING, "brief": _STRING}, ["name", "brief"]),
    ),
    "stop_agent": ToolSchema(
        name="stop_agent",
        description="Release an active agent after its current step.",
        parameters=_object({"name": _STRING}, ["name"]),
    ),
    "finalize": ToolSchema(
        name="finalize",
        description="Submit the team's final deliverable and end the episode.",
        parameters=_object({"deliverable": _STRING}, ["deliverable"]),
    ),
    "terminate": ToolSchema(
        name="terminate",
        description="Abort the episode without a deliverable.",
        parameters=_object({"reason": _STRING}, []),
    ),
    "load_skill": ToolSchema(
        name="load_skill",
        description="Return the full instructions of one of your skills.",
        parameters=_object({"name": _STRING}, ["name"]),
    ),
}


class ToolRegistry:
    """Named tools with JSON-schema arguments.

    Built-ins are dispatched by the episode; everything else is registered
    with a handler called as ``handler(caller, arguments)``.
    """

    def __init__(self) -> None:
        self._schemas: dict[str, ToolSchema] = dict(BUILTIN_SCHEMAS)
        self._handlers: dict[str, ToolHandler] = {}

    def register(
        self,
        name: str,
        handler: ToolHandler,
        description: str = "",
        parameters: dict[str, Any] | None = None,
    ) -> None:
        if name in BUILTIN_SCHEMAS:
            raise ValueError(f"'{name}' is a built-in tool")
        self._schemas[name] = ToolSchema(
            name=name,
            description=description or name,
            parameters=parameters or _object({}, []),
        )
        self._handlers[name] = handler

    @property
    def names(self) -> set[str]:
        return set(self._schemas)

    def is_registered(self, name: str) -> bool:
        return name in self._schemas

    @staticmethod
    def is_builtin(name: str) -> bool:
        return name in BUILTIN_SCHEMAS

    def allowed(self, allowed_tools: list[str]) -> list[str]:
        """Registered subset of an agent's tool list; an empty list means the built-ins."""
        wanted = allowed_tools or list(DEFAULT_AGENT_TOOLS)
        missing = [n for n in wanted if n not in self._schemas]
        if missing:
            logger.warning(f"Ignoring unregistered tools: {', '.join(missing)}")
        return [n for n in wanted if n in self._schemas]

    def schemas_for(self, allowed_tools: list[str]) -> list[ToolSchema]:
        """Fresh schema copies for one request."""
        return [self._schemas[n].model_copy(deep=True) for n in self.allowed(allowed_tools)]

    async def call(self, name: str, caller: str, arguments: dict[str, Any]) -> Any:
        handler = self._handlers.get(name)
        if handler is None:
            raise UnknownTool(name)
        result = handler(caller, arguments)
        if inspect.isawaitable(result):
            result = await result
        return result
