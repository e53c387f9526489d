"""Shared fixtures: fake clock, template teams and scripted gateways."""

from decimal import Decimal
from pathlib import Path

import pytest

from src.clock import FakeClock
from src.model_gateway import Script, ScriptedGateway, ScriptedResponse
from src.team_templates import build_team, write_template
from src.types import Budget, Task


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def budget() -> Budget:
    return Budget(max_seconds=600, max_messages=200, max_cost=Decimal("10"))


@pytest.fixture
def task() -> Task:
    return Task(id="t1", input="What is six times seven?", expected="42")


@pytest.fixture
def swe_team():
    return build_team("swe", backbone="scripted")


@pytest.fixture
def solo_team():
    return build_team("single", backbone="scripted")


@pytest.fixture
def team_root(tmp_path: Path):
    """Write a template team under ``tmp_path`` and return its root."""

    def make(template: str = "swe", name: str = "team") -> Path:
        root = tmp_path / name
        write_template(root, template, backbone="scripted")
        return root

    return make


@pytest.fixture
def scripted(clock: FakeClock):
    """Build a ScriptedGateway from response dicts; ``default`` answers everything else."""

    def make(*responses: dict, default: dict | None = None) -> ScriptedGateway:
        script = Script(
            responses=[ScriptedResponse.model_validate(r) for r in responses],
            default=ScriptedResponse.model_validate(default) if default else None,
        )
        return ScriptedGateway(script, clock)

    return make
