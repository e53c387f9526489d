"""Task evaluators: deliverable in, score out."""

import asyncio
import json
import logging
import os
from collections.abc import Callable, Mapping
from typing import Protocol

from pydantic import ValidationError

from .errors import EvaluatorFailure
from .types import Score, Task

logger = logging.getLogger(__name__)


class Evaluator(Protocol):
    async def evaluate(self, task: Task, deliverable: str) -> Score: ...


async def evaluate(evaluator: Evaluator, task: Task, deliverable: str) -> Score:
    """Run ``evaluator``, wrapping unexpected failures in ``EvaluatorFailure``."""
    try:
        return await evaluator.evaluate(task, deliverable)
    except EvaluatorFailure:
        raise
    except Exception as e:
        raise EvaluatorFailure(f"evaluator failed on task {task.id}: {e}") from e


def _normalize(text: str) -> str:
    return " ".join(text.split())


class ScriptedEvaluator:
    """Deterministic evaluator for tests.

    ``rule`` is either a mapping from deliverable to score or a callable;
    deliverables missing from a mapping score 0. A score of at least
    ``threshold`` passes.
    """

    def __init__(
        self,
        rule: Mapping[str, float] | Callable[[Task, str], float],
        threshold: float = 1.0,
    ):
        self.rule = rule
        self.threshold = threshold
        self.seen: list[tuple[str, str]] = []

    async def evaluate(self, task: Task, deliverable: str) -> Score:
        self.seen.append((task.id, deliverable))
        if callable(self.rule):
            value = float(self.rule(task, deliverable))
        else:
            value = float(self.rule.get(deliverable, 0.0))
        return Score(value=value, passed=value >= self.threshold)


class ExpectedAnswerEvaluator:
    """Exact match against ``task.expected`` after whitespace normalization."""

    async def evaluate(self, task: Task, deliverable: str) -> Score:
        if task.expected is None:
            raise EvaluatorFailure(f"task {task.id} has no expected answer")
        passed = _normalize(deliverable) == _normalize(task.expected)
        return Score(value=1.0 if passed else 0.0, passed=passed)


class CommandEvaluator:
    """Run an external harness with the deliverable on stdin.

    The command must print ``{"score": float, "passed": bool}`` on stdout.
    ``METATEAM_TASK_ID`` is set in its environment.
    """

    def __init__(self, command: list[str], timeout: float = 600.0):
        if not command:
            raise ValueError("command is empty")
        self.command = command
        self.timeout = timeout

    async def evaluate(self, task: Task, deliverable: str) -> Score:
        env = {**os.environ, "METATEAM_TASK_ID": task.id}
        proc = await asyncio.create_subprocess_exec(
            *self.command,
            stdin=asyncio.subprocess.PIPE,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE,
            env=env,
        )
        try:
            stdout, stderr = await asyncio.wait_for(
                proc.communicate(deliverable.encode("utf-8")), self.timeout
            )
        except TimeoutError as e:
            proc.kill()
            raise EvaluatorFailure(f"evaluator timed out after {self.timeout}s") from e
        if proc.returncode != 0:
            detail = stderr.decode("utf-8", "replace").strip()[:200]
            raise EvaluatorFailure(f"evaluator exited with {proc.returncode}: {detail}")
        try:
            data = json.loads(stdout)
            return Score(value=data["score"], passed=data["passed"])
        except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
            raise EvaluatorFailure(f"evaluator printed no valid score: {e}") from e
