import json
from decimal import Decimal

import httpx
import pytest

from src.errors import (
    GatewayUnavailable,
    NonRetryable,
    ProtocolError,
    ScriptExhausted,
    UnknownModel,
)
from src.model_gateway import (
    CostModel,
    RetryPolicy,
    Script,
    ScriptedResponse,
    TokenBucket,
    WireGateway,
    estimate_cost,
    scripted_next,
)
from src.tools import BUILTIN_SCHEMAS
from src.types import ChatMessage, ChatRequest, Usage


def request(agent="planner", step=1, tools=True, content="hello") -> ChatRequest:
    return ChatRequest(
        model="claude-sonnet-4-6",
        messages=[
            ChatMessage(role="system", content="sys"),
            ChatMessage(role="user", content=content),
        ],
        tool_schemas=[BUILTIN_SCHEMAS["finalize"]] if tools else None,
        agent=agent,
        step=step,
    )


def completion(content="done", tool_calls=None, prompt=1000, completion_tokens=200) -> dict:
    message = {"role": "assistant", "content": content}
    if tool_calls:
        message["tool_calls"] = tool_calls
    return {
        "model": "claude-sonnet-4-6",
        "choices": [{"message": message}],
        "usage": {"prompt_tokens": prompt, "completion_tokens": completion_tokens},
    }


def gateway(handler, clock) -> WireGateway:
    return WireGateway(
        base_url="http://backend.test/v1",
        api_key="k",
        clock=clock,
        transport=httpx.MockTransport(handler),
    )


def test_retry_delays():
    policy = RetryPolicy()
    assert [policy.delay(n) for n in range(1, 7)] == [1.5, 3, 6, 12, 24, 48]
    assert policy.delay(7) == 60


async def test_wire_gateway_prices_and_sends_tools(clock):
    seen = []

    def handler(req: httpx.Request) -> httpx.Response:
        seen.append(json.loads(req.content))
        assert req.headers["Authorization"] == "Bearer k"
        return httpx.Response(200, json=completion())

    gw = gateway(handler, clock)
    response = await gw.complete(request())
    await gw.aclose()

    assert response.text == "done"
    assert response.cost == Decimal("0.006")
    assert seen[0]["tools"][0]["function"]["name"] == "finalize"
    assert [m["role"] for m in seen[0]["messages"]] == ["system", "user"]
    assert clock.sleeps == []


async def test_wire_gateway_parses_tool_calls(clock):
    call = {
        "id": "c1",
        "type": "function",
        "function": {"name": "finalize", "arguments": '{"deliverable": "42"}'},
    }

    def handler(req: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json=completion(content=None, tool_calls=[call]))

    gw = gateway(handler, clock)
    response = await gw.complete(request())
    assert response.text == ""
    assert response.tool_calls[0].name == "finalize"
    assert response.tool_calls[0].arguments == {"deliverable": "42"}


async def test_transient_failures_back_off_then_give_up(clock):
    def handler(req: httpx.Request) -> httpx.Response:
        return httpx.Response(503)

    gw = gateway(handler, clock)
    with pytest.raises(GatewayUnavailable):
        await gw.complete(request())
    assert gw.attempts == 5
    assert clock.sleeps == [1.5, 3, 6, 12]


async def test_recovers_after_transient_failures(clock):
    statuses = iter([500, 429])

    def handler(req: httpx.Request) -> httpx.Response:
        status = next(statuses, 200)
        if status != 200:
            return httpx.Response(status)
        return httpx.Response(200, json=completion())

    gw = gateway(handler, clock)
    response = await gw.complete(request())
    assert response.text == "done"
    assert clock.sleeps == [1.5, 3]


async def test_timeouts_are_retried(clock):
    calls = []

    def handler(req: httpx.Request) -> httpx.Response:
        calls.append(req)
        if len(calls) == 1:
            raise httpx.ConnectTimeout("slow", request=req)
        return httpx.Response(200, json=completion())

    gw = gateway(handler, clock)
    await gw.complete(request())
    assert clock.sleeps == [1.5]


async def test_client_errors_are_not_retried(clock):
    def handler(req: httpx.Request) -> httpx.Response:
        return httpx.Response(401, text="bad key")

    gw = gateway(handler, clock)
    with pytest.raises(NonRetryable):
        await gw.complete(request())
    assert gw.attempts == 1
    assert clock.sleeps == []


async def test_protocol_violations(clock):
    call = {"id": "c1", "function": {"name": "finalize", "arguments": "{}"}}

    def with_calls(req: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json=completion(tool_calls=[call]))

    with pytest.raises(ProtocolError):
        await gateway(with_calls, clock).complete(request(tools=False))

    def not_json(req: httpx.Request) -> httpx.Response:
        return httpx.Response(200, text="<html>")

    with pytest.raises(ProtocolError):
        await gateway(not_json, clock).complete(request())

    def no_choices(req: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json={"choices": []})

    with pytest.raises(ProtocolError):
        await gateway(no_choices, clock).complete(request())


def test_estimate_cost_rounds_half_up():
    prices = CostModel(
        prices={"m": (Decimal("0.5"), Decimal("0")), "bad": (Decimal("-1"), Decimal("0"))}
    )
    assert estimate_cost(Usage(input_tokens=1), "m", prices) == Decimal("0.000001")
    assert estimate_cost(Usage(), "m", prices) == Decimal("0")
    default = CostModel.default()
    usage = Usage(input_tokens=1000, output_tokens=200)
    assert estimate_cost(usage, "claude-sonnet-4-6", default) == Decimal("0.006")
    assert estimate_cost(usage, "scripted", default) == Decimal("0")
    with pytest.raises(UnknownModel):
        estimate_cost(usage, "mystery", prices)
    with pytest.raises(ValueError):
        estimate_cost(usage, "bad", prices)


async def test_token_bucket_waits_for_refill(clock):
    bucket = TokenBucket(rate_per_second=1.0, capacity=2, clock=clock)
    for _ in range(3):
        await bucket.acquire()
    assert clock.sleeps == [1.0]


# Scripted backend


def entry(**kwargs) -> ScriptedResponse:
    return ScriptedResponse.model_validate(kwargs)


def test_scripted_lookup_order():
    script = Script(
        responses=[
            entry(agent="*", text="wildcard"),
            entry(agent="planner", text="per-agent"),
            entry(agent="planner", step=2, text="exact"),
        ],
        default=entry(text="default"),
    )
    assert scripted_next(script, "planner", 2).text == "exact"
    assert scripted_next(script, "planner", 1).text == "per-agent"
    assert scripted_next(script, "developer", 1).text == "wildcard"

    no_wildcard = Script(responses=script.responses[1:], default=script.default)
    assert scripted_next(no_wildcard, "developer", 1).text == "default"
    with pytest.raises(ScriptExhausted):
        scripted_next(Script(responses=script.responses[1:]), "developer", 4)


def test_scripted_when_contains():
    script = Script(
        responses=[
            entry(agent="planner", when_contains="report", text="saw report"),
            entry(agent="planner", text="waiting"),
        ]
    )
    assert scripted_next(script, "planner", 3, request(content="the report")).text == "saw report"
    assert scripted_next(script, "planner", 3, request(content="nothing")).text == "waiting"


async def test_scripted_gateway_replies(scripted, clock):
    gw = scripted(
        {
            "agent": "planner",
            "step": 1,
            "text": "go",
            "cost": "0.25",
            "latency": 3,
            "tool_calls": [{"name": "finalize", "arguments": {"deliverable": "x"}}],
        },
        {"agent": "planner", "step": 2, "error": "unavailable"},
        {"agent": "planner", "step": 3, "error": "fatal"},
    )
    response = await gw.complete(request())
    assert response.cost == Decimal("0.25")
    assert response.tool_calls[0].id == "call-planner-1-0"
    assert clock.now() == 3

    dropped = await gw.complete(request(tools=False))
    assert dropped.text == "go"
    assert dropped.tool_calls == []

    with pytest.raises(GatewayUnavailable):
        await gw.complete(request(step=2))
    with pytest.raises(NonRetryable):
        await gw.complete(request(step=3))
    with pytest.raises(ScriptExhausted):
        await gw.complete(request(step=4))
    assert len(gw.requests) == 5
