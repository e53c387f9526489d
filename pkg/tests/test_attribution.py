import json
import random
from fractions import Fraction

import pytest

from src.attribution import (
    SchemeConfig,
    accuracy_report,
    aggregate_votes,
    attribute_collaborative,
    attribute_global,
    attribute_local,
    attribute_many,
    parse_json_object,
    parse_submission,
    score,
    step_map,
)
from src.errors import LengthMismatch, ParseFailure
from src.types import AnnotatedTrace, StepRecord, Submission, Verdict

NAMES = ["alice", "bob", "carol", "dave"]


def accuse(analyzer, step, confidence, disagree=False) -> Submission:
    return Submission(
        analyzer=analyzer, i_erred=True, my_step=step, confidence=confidence, disagree=disagree
    )


def deny(analyzer, confidence) -> Submission:
    return Submission(analyzer=analyzer, i_erred=False, confidence=confidence)


# Weighted vote


def brute_force(subs, tenths, alpha, mapping) -> tuple[str, int]:
    """Enumerate every (agent, global step) and keep the first strictly heavier pair."""
    accused = {}
    for sub, k in zip(subs, tenths):
        if not sub.i_erred:
            continue
        pair = (sub.analyzer, mapping[sub.analyzer][sub.my_step - 1])
        weight = Fraction(k, 10) * (1 + Fraction(alpha) * (1 if sub.disagree else 0))
        accused[pair] = accused.get(pair, Fraction(0)) + weight
    if not accused:
        low = min(k for k in tenths)
        name = min(s.analyzer for s, k in zip(subs, tenths) if k == low)
        return name, mapping[name][0]
    best = None
    every_pair = sorted(
        ((agent, step) for agent, steps in mapping.items() for step in steps),
        key=lambda pair: (pair[1], pair[0]),
    )
    for pair in every_pair:
        if pair in accused and (best is None or accused[pair] > accused[best]):
            best = pair
    return best


@pytest.mark.parametrize("alpha", ["0", "0.5", "1"])
def test_vote_matches_enumeration(alpha):
    rng = random.Random(f"vote-{alpha}")
    for _ in range(1000):
        agents = NAMES[: rng.randint(1, len(NAMES))]
        sequence = agents + [rng.choice(agents) for _ in range(rng.randint(0, 6))]
        rng.shuffle(sequence)
        records = [
            StepRecord(index=i + 1, agent=a, input="", output="") for i, a in enumerate(sequence)
        ]
        mapping = step_map(records)
        subs, tenths = [], []
        for agent in agents:
            k = rng.randint(0, 10)
            tenths.append(k)
            if rng.random() < 0.5:
                subs.append(
                    accuse(
                        agent,
                        rng.randint(1, len(mapping[agent])),
                        k / 10,
                        disagree=rng.random() < 0.5,
                    )
                )
            else:
                subs.append(deny(agent, k / 10))
        verdict = aggregate_votes(subs, float(alpha), mapping)
        assert verdict.pair == brute_force(subs, tenths, alpha, mapping)


def test_single_accusation_wins():
    verdict = aggregate_votes([deny("alice", 0.9), accuse("bob", 2, 0.1)])
    assert verdict.pair == ("bob", 2)
    assert not verdict.fallback


def test_disagreement_weight_needs_alpha():
    subs = [accuse("alice", 1, 0.5, disagree=True), accuse("bob", 2, 0.8)]
    assert aggregate_votes(subs, alpha=1.0).pair == ("alice", 1)
    assert aggregate_votes(subs, alpha=0.0).pair == ("bob", 2)
    assert aggregate_votes(subs, alpha=1.0).audit["weights"] == {"alice@1": "1", "bob@2": "4/5"}


def test_universal_denial_blames_least_confident_first_step():
    mapping = {"alice": [1, 4], "bob": [2, 5], "carol": [3]}
    subs = [deny("alice", 0.7), deny("carol", 0.2), deny("bob", 0.2)]
    verdict = aggregate_votes(subs, 1.0, mapping)
    assert verdict.pair == ("bob", 2)
    assert verdict.fallback
    assert verdict.audit["fallback"] == "least-confident denier"


def test_ties_prefer_earlier_step_then_name():
    mapping = {"alice": [1, 5], "bob": [3]}
    subs = [accuse("alice", 2, 0.5), accuse("bob", 1, 0.5)]
    assert aggregate_votes(subs, 1.0, mapping).pair == ("bob", 3)
    assert aggregate_votes([accuse("bob", 3, 0.5), accuse("alice", 3, 0.5)]).pair == ("alice", 3)


def test_aggregate_needs_submissions():
    with pytest.raises(ValueError):
        aggregate_votes([])


# Parsing


def test_parse_json_object():
    parsed = parse_json_object('Sure: {"agent": "bob", "step": 2} done')
    assert parsed == {"agent": "bob", "step": 2}
    with pytest.raises(ParseFailure):
        parse_json_object("no braces")
    with pytest.raises(ParseFailure):
        parse_json_object("{broken")
    with pytest.raises(ParseFailure):
        parse_json_object("{not: json}")


def test_parse_submission():
    sub = parse_submission("bob", {"i_erred": "true", "my_step": "2", "confidence": 1.5}, 3)
    assert (sub.i_erred, sub.my_step, sub.confidence) == (True, 2, 1.0)
    denial = parse_submission("bob", {"i_erred": False, "my_step": 9, "confidence": 0.4}, 3)
    assert denial.my_step is None
    with pytest.raises(ParseFailure):
        parse_submission("bob", {"i_erred": True, "my_step": 4, "confidence": 0.4}, 3)
    with pytest.raises(ParseFailure):
        parse_submission("bob", {"i_erred": True, "confidence": 0.4}, 3)
    with pytest.raises(ParseFailure):
        parse_submission("bob", {"i_erred": "maybe", "confidence": 0.4}, 3)
    with pytest.raises(ParseFailure):
        parse_submission("bob", {"i_erred": True, "my_step": 1}, 3)

    data = {"i_erred": True, "my_step": 1, "confidence": 0.5, "disagree": True}
    assert not parse_submission("bob", data, 1, with_disagree=True).disagree
    data["counter_evidence"] = "step 1 shows the input was already wrong"
    assert parse_submission("bob", data, 1, with_disagree=True).disagree
    assert not parse_submission("bob", data, 1).disagree


# Schemes against a scripted backend


def steps_of(*pairs) -> list[StepRecord]:
    return [
        StepRecord(index=i, agent=agent, input=f"in {i}", output=output)
        for i, (agent, output) in enumerate(pairs, start=1)
    ]


def reply(**data) -> str:
    return json.dumps(data)


async def test_global_repairs_once(scripted):
    steps = steps_of(("planner", "plan"), ("coder", "code"))
    gw = scripted(
        {"agent": "global", "step": 1, "text": "I think the coder did it."},
        {"agent": "global", "step": 2, "text": reply(agent="coder", step=2, reason="bad code")},
    )
    verdict = await attribute_global(steps, gw)
    assert verdict.pair == ("coder", 2)
    assert verdict.audit["attempts"] == 2
    repair = gw.requests[1].messages[-1].content
    assert repair.startswith("Your previous answer could not be parsed")


async def test_global_falls_back_when_undecided(scripted):
    steps = steps_of(("planner", "plan"), ("coder", "code"))
    gw = scripted(default={"text": reply(agent="tester", step=1)})
    verdict = await attribute_global(steps, gw)
    assert verdict.pair == ("planner", 1)
    assert verdict.fallback


async def test_local_counts_unparsable_answers_as_denials(scripted):
    steps = steps_of(("planner", "plan"), ("coder", "code"), ("coder", "more code"))
    gw = scripted(
        {"agent": "analyzer:planner", "text": "no idea"},
        {"agent": "analyzer:coder", "text": reply(i_erred=True, my_step=2, confidence=0.3)},
    )
    verdict = await attribute_local(steps, gw)
    assert verdict.pair == ("coder", 3)
    assert verdict.audit["parse_failures"] == ["planner"]
    assert verdict.audit["step_map"] == {"planner": [1], "coder": [2, 3]}


def suite_trace(i: int) -> AnnotatedTrace:
    first_bug = i % 2 == 0
    steps = steps_of(
        ("planner", f"plan for task {i}"),
        ("coder", f"patch {i}" + (" BUG-A" if first_bug else "")),
        ("reviewer", "looks fine to me"),
        ("coder", f"follow-up {i}" + ("" if first_bug else " BUG-B")),
        ("planner", "finalized"),
    )
    return AnnotatedTrace(
        trace_id=f"suite-{i}",
        steps=steps,
        mistake_agent="coder",
        mistake_step=2 if first_bug else 4,
    )


def suite_script(scripted):
    def coder(marker, my_step, step, **extra):
        return {
            "agent": "analyzer:coder",
            "step": step,
            "when_contains": marker,
            "text": reply(
                i_erred=True,
                my_step=my_step,
                confidence=0.6,
                summary="my patch was wrong",
                **extra,
            ),
        }

    disagree = {"disagree": True, "counter_evidence": "the reviewer only relayed my patch"}
    return scripted(
        {"agent": "global", "step": 1, "text": reply(agent="coder", step=2, reason="bad patch")},
        coder("BUG-A", 1, 1),
        coder("BUG-B", 2, 1),
        coder("BUG-A", 1, 2, **disagree),
        coder("BUG-B", 2, 2, **disagree),
        {
            "agent": "analyzer:reviewer",
            "text": reply(i_erred=True, my_step=1, confidence=0.9, summary="I approved it"),
        },
        {
            "agent": "analyzer:planner",
            "text": reply(i_erred=False, my_step=None, confidence=0.1, summary="plan was fine"),
        },
    )


async def test_collaborative_beats_single_view_schemes(scripted):
    traces = [suite_trace(i) for i in range(20)]
    gw = suite_script(scripted)
    reports = {
        scheme: (await attribute_many(traces, scheme, gw)).report.overall
        for scheme in ("global", "local", "collab")
    }
    assert (reports["local"].agent_accuracy, reports["local"].step_accuracy) == (0.0, 0.0)
    assert (reports["global"].agent_accuracy, reports["global"].step_accuracy) == (1.0, 0.5)
    assert (reports["collab"].agent_accuracy, reports["collab"].step_accuracy) == (1.0, 1.0)
    for metric in ("agent_accuracy", "step_accuracy"):
        best_single = max(getattr(reports[s], metric) for s in ("global", "local"))
        assert getattr(reports["collab"], metric) >= best_single


async def test_collaborative_audit_records_rounds(scripted):
    gw = suite_script(scripted)
    verdict = await attribute_collaborative(suite_trace(1), gw, SchemeConfig(rounds=1))
    assert verdict.pair == ("coder", 4)
    assert [r["round"] for r in verdict.audit["rounds"]] == [0, 1]
    assert verdict.audit["rounds"][0]["provisional"] == ["reviewer", 3]
    board = [r for r in gw.requests if r.agent == "analyzer:planner" and r.step == 2][0]
    assert "- coder: my patch was wrong" in board.messages[0].content
    assert "- planner:" not in board.messages[0].content


# Scoring


def verdict(agent, step) -> Verdict:
    return Verdict(mistake_agent=agent, mistake_step=step)


def test_score():
    verdicts = [verdict("coder", 2), verdict("coder", 3), verdict("planner", 1)]
    truths = [("coder", 2), ("coder", 2), ("coder", 1)]
    assert score(verdicts, truths) == (2 / 3, 1 / 3)
    with pytest.raises(LengthMismatch):
        score(verdicts, truths[:2])
    with pytest.raises(LengthMismatch):
        score([], [])
    assert score([], [], empty_ok=True) == (0.0, 0.0)


def test_accuracy_report_buckets():
    short = suite_trace(0)
    long = short.model_copy(update={"trace_id": "long", "token_estimate": 200_000})
    report = accuracy_report([short, long], [verdict("coder", 2), verdict("coder", 4)], "collab")
    assert report.buckets["<=128K"].step_accuracy == 1.0
    assert report.buckets[">128K"].traces == 1
    assert report.buckets[">128K"].step_accuracy == 0.0
    assert report.overall.agent_accuracy == 1.0
    assert report.overall.step_accuracy == 0.5


async def test_attribute_many_repeats(scripted):
    gw = suite_script(scripted)
    run = await attribute_many([suite_trace(0), suite_trace(1)], "global", gw, repeats=3)
    assert len(run.verdicts) == 3
    assert run.report.repeats == 3
    assert run.report.overall.step_accuracy == 0.5
    with pytest.raises(ValueError):
        await attribute_many([suite_trace(0)], "oracle", gw)
    with pytest.raises(LengthMismatch):
        await attribute_many([], "global", gw)
