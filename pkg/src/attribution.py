"""Failure attribution over multi-agent traces.

Three schemes decide which (agent, step) caused a failure:

- ``global``: one model call over the flattened trace.
- ``local``: one analyzer per agent audits its own sub-trace; the most
  confident self-accusation wins.
- ``collaborative``: analyzers post summaries, read each other's summaries and
  a provisional verdict, re-audit, and vote with weight ``c * (1 + alpha * r)``.

Step numbers in verdicts are global (1-based over the whole trace); analyzers
answer in their own local numbering and the mapping is kept in the audit.
"""

import asyncio
import json
import logging
import re
from collections import Counter
from collections.abc import Awaitable, Callable, Sequence
from fractions import Fraction
from typing import Any, Literal

from pydantic import BaseModel, Field

from . import config, prompts
from .errors import LengthMismatch, ParseFailure
from .model_gateway import ModelGateway
from .trace_store import step_records
from .types import (
    AnnotatedTrace,
    ChatMessage,
    ChatRequest,
    StepRecord,
    Submission,
    Trajectory,
    Verdict,
)

logger = logging.getLogger(__name__)

JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


class SchemeConfig(BaseModel):
    alpha: float = Field(default=config.ATTRIBUTION_ALPHA, ge=0)
    rounds: int = Field(default=config.ATTRIBUTION_ROUNDS, ge=1)
    verdict_source: Literal["consensus", "global"] = "consensus"
    model: str = config.DEFAULT_MODEL
    temperature: float = Field(default=config.DEFAULT_TEMPERATURE, ge=0, le=2)


# Trace views


def trace_steps(trace: AnnotatedTrace | Trajectory | Sequence[StepRecord]) -> list[StepRecord]:
    if isinstance(trace, AnnotatedTrace):
        return list(trace.steps)
    if isinstance(trace, Trajectory):
        return step_records(trace)
    return list(trace)


def step_map(steps: Sequence[StepRecord]) -> dict[str, list[int]]:
    """Agent -> global indices of its steps; local step k is ``map[agent][k - 1]``."""
    mapping: dict[str, list[int]] = {}
    for position, step in enumerate(steps, start=1):
        mapping.setdefault(step.agent, []).append(position)
    return mapping


def flatten(steps: Sequence[StepRecord]) -> str:
    return "\n\n".join(
        f"[step {i}] agent: {s.agent}\ninput: {s.input}\noutput: {s.output}"
        for i, s in enumerate(steps, start=1)
    )


def render_local(steps: Sequence[StepRecord], agent: str) -> str:
    own = [s for s in steps if s.agent == agent]
    return "\n\n".join(
        f"[step {i}]\ninput: {s.input}\noutput: {s.output}" for i, s in enumerate(own, start=1)
    )


# Parsing


def parse_json_object(text: str) -> dict[str, Any]:
    """First-brace-to-last-brace JSON object inside a model reply."""
    match = JSON_OBJECT.search(text or "")
    if not match:
        raise ParseFailure("no JSON object in response")
    try:
        data = json.loads(match.group(0))
    except json.JSONDecodeError as e:
        raise ParseFailure(f"invalid JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise ParseFailure("response JSON is not an object")
    return data


def _as_bool(value: Any, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false"):
        return value.lower() == "true"
    raise ParseFailure(f"'{key}' is not a boolean")


def parse_submission(
    analyzer: str, data: dict[str, Any], local_steps: int, with_disagree: bool = False
) -> Submission:
    """Validate an analyzer's structured answer against its sub-trace length."""
    if "i_erred" not in data or "confidence" not in data:
        raise ParseFailure("missing i_erred or confidence")
    i_erred = _as_bool(data["i_erred"], "i_erred")
    try:
        confidence = float(data["confidence"])
    except (TypeError, ValueError) as e:
        raise ParseFailure("confidence is not a number") from e
    if not 0.0 <= confidence <= 1.0:
        logger.warning(f"Clamping confidence {confidence} from {analyzer} into [0, 1]")
        confidence = min(1.0, max(0.0, confidence))
    my_step = data.get("my_step")
    if i_erred:
        try:
            my_step = int(my_step)
        except (TypeError, ValueError) as e:
            raise ParseFailure("my_step is required when i_erred") from e
        if not 1 <= my_step <= local_steps:
            raise ParseFailure(f"my_step {my_step} outside 1..{local_steps}")
    else:
        my_step = None
    disagree = False
    if with_disagree and "disagree" in data:
        evidence = str(data.get("counter_evidence") or "").strip()
        disagree = _as_bool(data["disagree"], "disagree") and bool(evidence)
    return Submission(
        analyzer=analyzer,
        i_erred=i_erred,
        my_step=my_step,
        confidence=confidence,
        disagree=disagree,
        summary=str(data.get("summary") or "")[: config.SUMMARY_MAX_CHARS],
    )


def _denial(analyzer: str) -> Submission:
    return Submission(analyzer=analyzer, i_erred=False, confidence=0.0)


# Aggregation


def vote_weight(submission: Submission, alpha: float) -> Fraction:
    """w = c * (1 + alpha * r), exact."""
    r = 1 if submission.disagree else 0
    return Fraction(str(submission.confidence)) * (1 + Fraction(str(alpha)) * r)


def _winner(totals: dict[tuple[str, int], Fraction]) -> tuple[str, int]:
    # highest weight, then smaller global step, then smaller agent name
    agent, step = min(totals, key=lambda pair: (-totals[pair], pair[1], pair[0]))
    return agent, step


def least_confident_denier(submissions: Sequence[Submission]) -> Submission:
    return min(submissions, key=lambda s: (s.confidence, s.analyzer))


def aggregate_votes(
    submissions: Sequence[Submission],
    alpha: float = config.ATTRIBUTION_ALPHA,
    steps_by_agent: dict[str, list[int]] | None = None,
    scheme: str = "vote",
) -> Verdict:
    """Weighted vote over self-accusations.

    Each accusation adds ``c * (1 + alpha * r)`` to its (agent, global step)
    pair and the heaviest pair wins. With no accusation, the least confident
    denier is charged with its first step.
    """
    if not submissions:
        raise ValueError("aggregate_votes needs at least one submission")

    def to_global(agent: str, local: int) -> int:
        if steps_by_agent is None:
            return local
        return steps_by_agent[agent][local - 1]

    totals: dict[tuple[str, int], Fraction] = {}
    for sub in submissions:
        if not sub.i_erred:
            continue
        pair = (sub.analyzer, to_global(sub.analyzer, sub.my_step))
        totals[pair] = totals.get(pair, Fraction(0)) + vote_weight(sub, alpha)
    audit: dict[str, Any] = {
        "alpha": alpha,
        "submissions": [s.model_dump() for s in submissions],
        "weights": {f"{a}@{s}": str(w) for (a, s), w in sorted(totals.items())},
    }
    if steps_by_agent is not None:
        audit["step_map"] = steps_by_agent
    if totals:
        agent, step = _winner(totals)
        return Verdict(mistake_agent=agent, mistake_step=step, scheme=scheme, audit=audit)
    denier = least_confident_denier(submissions)
    first = steps_by_agent[denier.analyzer][0] if steps_by_agent is not None else 1
    audit["fallback"] = "least-confident denier"
    return Verdict(
        mistake_agent=denier.analyzer,
        mistake_step=first,
        scheme=scheme,
        fallback=True,
        audit=audit,
    )


def consensus_verdict(
    submissions: Sequence[Submission], steps_by_agent: dict[str, list[int]]
) -> Verdict:
    """Unweighted majority pair over accusations, same tie-break and fallback."""
    counts = Counter(
        (s.analyzer, steps_by_agent[s.analyzer][s.my_step - 1]) for s in submissions if s.i_erred
    )
    if not counts:
        return aggregate_votes(submissions, 0.0, steps_by_agent, scheme="consensus")
    agent, step = _winner({pair: Fraction(n) for pair, n in counts.items()})
    return Verdict(
        mistake_agent=agent,
        mistake_step=step,
        scheme="consensus",
        audit={"counts": {f"{a}@{s}": n for (a, s), n in sorted(counts.items())}},
    )


# Schemes


def _request(cfg: SchemeConfig, content: str, agent: str, step: int) -> ChatRequest:
    return ChatRequest(
        model=cfg.model,
        messages=[ChatMessage(role="user", content=content)],
        temperature=cfg.temperature,
        agent=agent,
        step=step,
    )


async def attribute_global(
    trace: AnnotatedTrace | Trajectory | Sequence[StepRecord],
    gateway: ModelGateway,
    cfg: SchemeConfig | None = None,
) -> Verdict:
    """Single call over the flattened trace, with one repair retry."""
    cfg = cfg or SchemeConfig()
    steps = trace_steps(trace)
    if not steps:
        raise ValueError("trace has no steps")
    agents = {s.agent for s in steps}
    request = _request(
        cfg, prompts.ATTRIBUTION_GLOBAL.format(trace=flatten(steps)), "global", 1
    )
    error = ""
    for attempt in (1, 2):
        response = await gateway.complete(request)
        try:
            data = parse_json_object(response.text)
            agent, step = data.get("agent"), int(data.get("step"))
            if agent not in agents or not 1 <= step <= len(steps):
                raise ParseFailure(f"({agent}, {step}) is not a step of the trace")
            return Verdict(
                mistake_agent=agent,
                mistake_step=step,
                scheme="global",
                audit={"attempts": attempt, "reason": str(data.get("reason", ""))},
            )
        except (ParseFailure, TypeError, ValueError) as e:
            error = str(e)
            logger.warning(f"Global attribution attempt {attempt} unparsable: {error}")
            repair = prompts.ATTRIBUTION_REPAIR.format(
                previous=response.text, keys='"agent", "step", "reason"'
            )
            request = ChatRequest(
                model=cfg.model,
                messages=[
                    *request.messages,
                    ChatMessage(role="assistant", content=response.text),
                    ChatMessage(role="user", content=repair),
                ],
                temperature=cfg.temperature,
                agent="global",
                step=2,
            )
    return Verdict(
        mistake_agent=steps[0].agent,
        mistake_step=1,
        scheme="global",
        fallback=True,
        audit={"fallback": "undecided", "error": error},
    )


async def _analyze(
    gateway: ModelGateway,
    cfg: SchemeConfig,
    agent: str,
    content: str,
    step: int,
    local_steps: int,
    with_disagree: bool = False,
) -> tuple[Submission, bool]:
    """One analyzer call; unparsable answers count as denial with confidence 0."""
    response = await gateway.complete(_request(cfg, content, f"analyzer:{agent}", step))
    try:
        data = parse_json_object(response.text)
        return parse_submission(agent, data, local_steps, with_disagree), True
    except ParseFailure as e:
        logger.warning(f"Analyzer {agent} answer unparsable ({e}); counting as denial")
        return _denial(agent), False


async def attribute_local(
    trace: AnnotatedTrace | Trajectory | Sequence[StepRecord],
    gateway: ModelGateway,
    cfg: SchemeConfig | None = None,
) -> Verdict:
    """One analyzer per agent; the most confident self-accusation wins."""
    cfg = cfg or SchemeConfig()
    steps = trace_steps(trace)
    mapping = step_map(steps)
    results = await asyncio.gather(
        *(
            _analyze(
                gateway,
                cfg,
                agent,
                prompts.ATTRIBUTION_LOCAL.format(agent=agent, trace=render_local(steps, agent)),
                1,
                len(indices),
            )
            for agent, indices in mapping.items()
        )
    )
    submissions = [sub for sub, _ in results]
    verdict = aggregate_votes(submissions, 0.0, mapping, scheme="local")
    failed = [sub.analyzer for sub, ok in results if not ok]
    return verdict.model_copy(update={"audit": {**verdict.audit, "parse_failures": failed}})


async def attribute_collaborative(
    trace: AnnotatedTrace | Trajectory | Sequence[StepRecord],
    gateway: ModelGateway,
    cfg: SchemeConfig | None = None,
) -> Verdict:
    """Summary exchange, provisional verdict, re-audit and weighted vote."""
    cfg = cfg or SchemeConfig()
    steps = trace_steps(trace)
    mapping = step_map(steps)
    agents = list(mapping)
    local = {a: render_local(steps, a) for a in agents}

    first = await asyncio.gather(
        *(
            _analyze(
                gateway,
                cfg,
                a,
                prompts.ATTRIBUTION_SUMMARY.format(agent=a, trace=local[a]),
                1,
                len(mapping[a]),
            )
            for a in agents
        )
    )
    current = [sub for sub, _ in first]
    if cfg.verdict_source == "global":
        provisional = await attribute_global(steps, gateway, cfg)
    else:
        provisional = consensus_verdict(current, mapping)
    history: list[dict[str, Any]] = [
        {"round": 0, "provisional": list(provisional.pair), "source": cfg.verdict_source}
    ]

    for round_no in range(1, cfg.rounds + 1):
        summaries = {s.analyzer: s.summary for s in current}

        def board(me: str) -> str:
            lines = [f"- {a}: {summaries[a] or '(no summary)'}" for a in agents if a != me]
            return "\n".join(lines) or "(no teammates)"

        results = await asyncio.gather(
            *(
                _analyze(
                    gateway,
                    cfg,
                    a,
                    prompts.ATTRIBUTION_REAUDIT.format(
                        agent=a,
                        summaries=board(a),
                        provisional_agent=provisional.mistake_agent,
                        provisional_step=provisional.mistake_step,
                        trace=local[a],
                    ),
                    round_no + 1,
                    len(mapping[a]),
                    with_disagree=True,
                )
                for a in agents
            )
        )
        current = [
            sub if ok or not prev.summary else sub.model_copy(update={"summary": prev.summary})
            for (sub, ok), prev in zip(results, current, strict=True)
        ]
        if round_no < cfg.rounds:
            provisional = aggregate_votes(current, cfg.alpha, mapping, scheme="collaborative")
        history.append({"round": round_no, "provisional": list(provisional.pair)})

    verdict = aggregate_votes(current, cfg.alpha, mapping, scheme="collaborative")
    return verdict.model_copy(update={"audit": {**verdict.audit, "rounds": history}})


Scheme = Callable[..., Awaitable[Verdict]]

SCHEMES: dict[str, Scheme] = {
    "global": attribute_global,
    "local": attribute_local,
    "collab": attribute_collaborative,
}


# Scoring


def score(
    verdicts: Sequence[Verdict],
    truths: Sequence[tuple[str, int]],
    empty_ok: bool = False,
) -> tuple[float, float]:
    """Exact-match (agent accuracy, step accuracy).

    Empty input raises ``LengthMismatch`` unless ``empty_ok``, which
    returns ``(0.0, 0.0)``.
    """
    if len(verdicts) != len(truths):
        raise LengthMismatch(f"{len(verdicts)} verdicts for {len(truths)} truths")
    if not verdicts:
        if empty_ok:
            return 0.0, 0.0
        raise LengthMismatch("no verdicts to score")
    agent_hits = sum(v.mistake_agent == agent for v, (agent, _) in zip(verdicts, truths))
    step_hits = sum(v.pair == (agent, step) for v, (agent, step) in zip(verdicts, truths))
    return agent_hits / len(verdicts), step_hits / len(verdicts)


class BucketAccuracy(BaseModel):
    traces: int
    agent_accuracy: float
    step_accuracy: float


class AccuracyReport(BaseModel):
    scheme: str = ""
    repeats: int = 1
    buckets: dict[str, BucketAccuracy]
    overall: BucketAccuracy


BUCKETS = ("<=128K", ">128K")


def accuracy_report(
    traces: Sequence[AnnotatedTrace], verdicts: Sequence[Verdict], scheme: str = ""
) -> AccuracyReport:
    """Per-bucket and overall exact-match accuracy."""
    if len(traces) != len(verdicts):
        raise LengthMismatch(f"{len(verdicts)} verdicts for {len(traces)} traces")
    buckets = {}
    for bucket in BUCKETS:
        pairs = [(t, v) for t, v in zip(traces, verdicts) if t.bucket == bucket]
        agent_acc, step_acc = score(
            [v for _, v in pairs], [(t.mistake_agent, t.mistake_step) for t, _ in pairs], True
        )
        buckets[bucket] = BucketAccuracy(
            traces=len(pairs), agent_accuracy=agent_acc, step_accuracy=step_acc
        )
    agent_acc, step_acc = score(
        verdicts, [(t.mistake_agent, t.mistake_step) for t in traces], empty_ok=True
    )
    return AccuracyReport(
        scheme=scheme,
        buckets=buckets,
        overall=BucketAccuracy(
            traces=len(traces), agent_accuracy=agent_acc, step_accuracy=step_acc
        ),
    )


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def average_reports(reports: Sequence[AccuracyReport]) -> AccuracyReport:
    """Arithmetic mean of repeated runs (avg@k)."""

    def mean_of(pick: Callable[[AccuracyReport], BucketAccuracy]) -> BucketAccuracy:
        picked = [pick(r) for r in reports]
        return BucketAccuracy(
            traces=picked[0].traces,
            agent_accuracy=_mean([p.agent_accuracy for p in picked]),
            step_accuracy=_mean([p.step_accuracy for p in picked]),
        )

    return AccuracyReport(
        scheme=reports[0].scheme,
        repeats=len(reports),
        buckets={b: mean_of(lambda r, b=b: r.buckets[b]) for b in BUCKETS},
        overall=mean_of(lambda r: r.overall),
    )


class AttributionRun(BaseModel):
    verdicts: list[list[Verdict]]
    report: AccuracyReport


async def attribute_many(
    traces: Sequence[AnnotatedTrace],
    scheme: str,
    gateway: ModelGateway,
    cfg: SchemeConfig | None = None,
    repeats: int = 1,
) -> AttributionRun:
    """Run ``scheme`` over every trace ``repeats`` times and average the accuracy."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}' (choose from {', '.join(SCHEMES)})")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not traces:
        raise LengthMismatch("no traces to attribute")
    run = SCHEMES[scheme]
    all_verdicts = []
    reports = []
    for k in range(repeats):
        verdicts = [await run(trace, gateway, cfg) for trace in traces]
        all_verdicts.append(verdicts)
        reports.append(accuracy_report(traces, verdicts, scheme))
        logger.info(
            f"{scheme} repeat {k + 1}/{repeats}: agent {reports[-1].overall.agent_accuracy:.3f}, "
            f"step {reports[-1].overall.step_accuracy:.3f}"
        )
    return AttributionRun(verdicts=all_verdicts, report=average_reports(reports))
