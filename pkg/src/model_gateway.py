"""Model backends: an OpenAI-compatible HTTP client and a scripted test backend.

Both satisfy ``ModelGateway``: ``await gateway.complete(request)`` returns a
``ChatResponse`` whose ``cost`` is already priced, so the runtime can charge
it to the event that records the call.
"""

import asyncio
import json
import logging
from collections.abc import Awaitable, Callable
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Literal, Protocol, TypeVar

import httpx
import yaml
from pydantic import BaseModel, Field, ValidationError

from . import config
from .clock import Clock, SystemClock
from .errors import (
    GatewayUnavailable,
    NonRetryable,
    ProtocolError,
    SchemaError,
    ScriptExhausted,
    UnknownModel,
)
from .types import MICRO, ChatMessage, ChatRequest, ChatResponse, ToolCall, Usage

logger = logging.getLogger(__name__)

T = TypeVar("T")
RETRYABLE_STATUS = {408, 409, 425, 429}


class ModelGateway(Protocol):
    async def complete(self, request: ChatRequest) -> ChatResponse: ...


class RetryPolicy(BaseModel):
    """Exponential back-off: attempt n waits min(base * 2**(n-1), max) before retrying."""

    max_attempts: int = Field(default=config.RETRY_MAX_ATTEMPTS, ge=1)
    base_delay: float = Field(default=config.RETRY_BASE_DELAY_SECONDS, ge=0)
    max_delay: float = Field(default=config.RETRY_MAX_DELAY_SECONDS, ge=0)

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * 2 ** (attempt - 1), self.max_delay)


class CostModel(BaseModel):
    """Per-million-token (input, output) prices by model id."""

    prices: dict[str, tuple[Decimal, Decimal]]

    @classmethod
    def default(cls) -> "CostModel":
        prices = {m: (Decimal(i), Decimal(o)) for m, (i, o) in config.MODEL_PRICES.items()}
        if config.PRICES_PATH:
            data = yaml.safe_load(Path(config.PRICES_PATH).read_text(encoding="utf-8")) or {}
            for model, pair in data.items():
                prices[str(model)] = (Decimal(str(pair["input"])), Decimal(str(pair["output"])))
        return cls(prices=prices)

    def price(self, model: str) -> tuple[Decimal, Decimal]:
        try:
            p_in, p_out = self.prices[model]
        except KeyError:
            raise UnknownModel(model) from None
        if p_in < 0 or p_out < 0:
            raise ValueError(f"negative price for {model}")
        return p_in, p_out


def estimate_cost(usage: Usage, model: str, cost_model: CostModel) -> Decimal:
    """Exact cost of one call, rounded half-up to micro-units."""
    p_in, p_out = cost_model.price(model)
    raw = (Decimal(usage.input_tokens) * p_in + Decimal(usage.output_tokens) * p_out) / Decimal(
        1_000_000
    )
    return raw.quantize(MICRO, rounding=ROUND_HALF_UP)


class TokenBucket:
    """Process-wide request rate limiter shared by every agent loop."""

    def __init__(self, rate_per_second: float, capacity: int, clock: Clock):
        self.rate = rate_per_second
        self.capacity = capacity
        self.clock = clock
        self._tokens = float(capacity)
        self._last = clock.now()
        self._lock = asyncio.Lock()

    async def acquire(self) -> None:
        async with self._lock:
            while True:
                now = self.clock.now()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                await self.clock.sleep((1 - self._tokens) / self.rate)


class TransientError(Exception):
    """A failure worth retrying (timeout, 5xx, rate limit)."""


async def with_retries(
    call: Callable[[], Awaitable[T]],
    policy: RetryPolicy,
    clock: Clock,
    label: str = "model call",
) -> T:
    """Run ``call`` until it succeeds, backing off on ``TransientError``."""
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return await call()
        except TransientError as e:
            if attempt == policy.max_attempts:
                logger.error(f"{label} failed after {attempt} attempts: {e}")
                raise GatewayUnavailable(f"{label}: {e}") from e
            delay = policy.delay(attempt)
            logger.warning(f"{label} attempt {attempt} failed ({e}); retrying in {delay}s")
            await clock.sleep(delay)
    raise GatewayUnavailable(label)


def _wire_message(message: ChatMessage) -> dict[str, Any]:
    wire: dict[str, Any] = {"role": message.role, "content": message.content}
    if message.tool_calls:
        wire["tool_calls"] = [
            {
                "id": call.id,
                "type": "function",
                "function": {"name": call.name, "arguments": json.dumps(call.arguments)},
            }
            for call in message.tool_calls
        ]
    if message.tool_call_id:
        wire["tool_call_id"] = message.tool_call_id
    return wire


def build_payload(request: ChatRequest) -> dict[str, Any]:
    """Chat-completion body. Tool schemas are serialized afresh on every call."""
    payload: dict[str, Any] = {
        "model": request.model,
        "messages": [_wire_message(m) for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }
    if request.tool_schemas:
        payload["tools"] = [
            {
                "type": "function",
                "function": {
                    "name": s.name,
                    "description": s.description,
                    "parameters": s.parameters,
                },
            }
            for s in request.tool_schemas
        ]
    return payload


def parse_completion(data: dict[str, Any], request: ChatRequest) -> ChatResponse:
    try:
        message = data["choices"][0]["message"]
        usage = data.get("usage") or {}
        calls = []
        for raw in message.get("tool_calls") or []:
            arguments = raw["function"].get("arguments") or "{}"
            calls.append(
                ToolCall(
                    id=raw.get("id") or f"call-{len(calls)}",
                    name=raw["function"]["name"],
                    arguments=json.loads(arguments) if isinstance(arguments, str) else arguments,
                )
            )
        response = ChatResponse(
            text=message.get("content") or "",
            tool_calls=calls,
            usage=Usage(
                input_tokens=usage.get("prompt_tokens", 0),
                output_tokens=usage.get("completion_tokens", 0),
            ),
            model=data.get("model") or request.model,
        )
    except (KeyError, IndexError, TypeError, json.JSONDecodeError, ValidationError) as e:
        raise ProtocolError(f"malformed completion: {e}") from e
    if response.tool_calls and not request.tools_enabled:
        raise ProtocolError("tool calls returned for a request without tools")
    return response


class WireGateway:
    """OpenAI-compatible chat-completion client with retry and cost accounting."""

    def __init__(
        self,
        base_url: str = config.API_BASE_URL,
        api_key: str = config.API_KEY,
        policy: RetryPolicy | None = None,
        cost_model: CostModel | None = None,
        clock: Clock | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
        rate_limiter: TokenBucket | None = None,
        timeout: float = config.GATEWAY_TIMEOUT_SECONDS,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.AsyncClient(
            base_url=base_url, headers=headers, timeout=timeout, transport=transport
        )
        self.policy = policy or RetryPolicy()
        self.cost_model = cost_model or CostModel.default()
        self.clock = clock or SystemClock()
        self.rate_limiter = rate_limiter
        self.attempts = 0

    async def _attempt(self, request: ChatRequest) -> ChatResponse:
        if self.rate_limiter:
            await self.rate_limiter.acquire()
        self.attempts += 1
        try:
            response = await self.client.post("/chat/completions", json=build_payload(request))
        except httpx.TimeoutException as e:
            raise TransientError(f"timeout: {e}") from e
        except httpx.TransportError as e:
            raise TransientError(f"transport: {e}") from e
        if response.status_code >= 500 or response.status_code in RETRYABLE_STATUS:
            raise TransientError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise NonRetryable(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            data = response.json()
        except ValueError as e:
            raise ProtocolError(f"non-JSON completion: {e}") from e
        return parse_completion(data, request)

    async def complete(self, request: ChatRequest) -> ChatResponse:
        label = f"{request.agent or 'model'} step {request.step}"
        response = await with_retries(
            lambda: self._attempt(request), self.policy, self.clock, label
        )
        cost = estimate_cost(response.usage, request.model, self.cost_model)
        return response.model_copy(update={"cost": cost})

    async def aclose(self) -> None:
        await self.client.aclose()


# Scripted backend


class ScriptedToolCall(BaseModel):
    name: str
    arguments: dict[str, Any] = Field(default_factory=dict)


class ScriptedResponse(BaseModel):
    """One scripted reply. ``step`` None applies to every step of ``agent``."""

    agent: str = "*"
    step: int | None = None
    text: str = ""
    tool_calls: list[ScriptedToolCall] = Field(default_factory=list)
    usage: Usage = Field(default_factory=Usage)
    cost: Decimal | None = None
    latency: float = Field(default=0.0, ge=0)
    when_contains: str | None = None
    error: Literal["unavailable", "fatal"] | None = None

    def applies(self, request: ChatRequest) -> bool:
        if self.when_contains is None:
            return True
        return any(self.when_contains in m.content for m in request.messages)


class Script(BaseModel):
    """Response table keyed by (agent, step)."""

    responses: list[ScriptedResponse] = Field(default_factory=list)
    default: ScriptedResponse | None = None


def load_script(path: str | Path) -> Script:
    """Read a YAML script with a ``responses`` list and an optional ``default``."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return Script.model_validate(data)
    except (yaml.YAMLError, ValidationError) as e:
        raise SchemaError(f"invalid script {path}: {e}") from e


def scripted_next(script: Script, agent: str, step: int, request: ChatRequest | None = None):
    """Look up the scripted reply for (agent, step): exact key, then agent default, then default."""
    exact = [r for r in script.responses if r.agent == agent and r.step == step]
    per_agent = [r for r in script.responses if r.agent == agent and r.step is None]
    wildcard = [r for r in script.responses if r.agent == "*" and r.step in (None, step)]
    fallback = [script.default] if script.default else []
    for candidate in (*exact, *per_agent, *wildcard, *fallback):
        if request is None or candidate.applies(request):
            return candidate
    raise ScriptExhausted(agent, step)


class ScriptedGateway:
    """Deterministic backend replaying a ``Script``.

    A request without tool schemas never yields tool calls: scripted calls
    are dropped with a warning.
    """

    def __init__(
        self,
        script: Script,
        clock: Clock | None = None,
        cost_model: CostModel | None = None,
    ):
        self.script = script
        self.clock = clock or SystemClock()
        self.cost_model = cost_model
        self.requests: list[ChatRequest] = []

    async def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        entry = scripted_next(self.script, request.agent, request.step, request)
        if entry.latency:
            await self.clock.sleep(entry.latency)
        if entry.error == "unavailable":
            raise GatewayUnavailable(f"scripted outage at ({request.agent}, {request.step})")
        if entry.error == "fatal":
            raise NonRetryable(f"scripted rejection at ({request.agent}, {request.step})")
        calls = [
            ToolCall(
                id=f"call-{request.agent}-{request.step}-{i}", name=c.name, arguments=c.arguments
            )
            for i, c in enumerate(entry.tool_calls)
        ]
        if calls and not request.tools_enabled:
            logger.warning(f"Dropping scripted tool calls for tool-free request {request.agent}")
            calls = []
        if entry.cost is not None:
            cost = entry.cost
        elif self.cost_model is not None:
            cost = estimate_cost(entry.usage, request.model, self.cost_model)
        else:
            cost = Decimal("0")
        return ChatResponse(
            text=entry.text, tool_calls=calls, usage=entry.usage, model=request.model, cost=cost
        )
