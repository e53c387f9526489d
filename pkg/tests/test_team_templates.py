import pytest

from src import config
from src.evolution import check_scaffold
from src.team_templates import TEMPLATES, build_team, write_template


@pytest.mark.parametrize("template", sorted(TEMPLATES))
def test_every_template_builds_a_valid_team(template):
    team = build_team(template)
    spec = TEMPLATES[template]
    assert team.name == template
    assert team.entry_agent == spec.entry
    assert team.names == [role.name for role in spec.roles]
    assert team.version == 0
    assert all(a.config.backbone == config.DEFAULT_MODEL for a in team.pool)
    assert all(a.role_prompt.startswith("# ") for a in team.pool)


def test_name_and_backbone_overrides():
    team = build_team("single", name="solo", backbone="scripted")
    assert team.name == "solo"
    assert team.agent("solver").config.backbone == "scripted"


def test_unknown_template():
    with pytest.raises(ValueError, match="unknown template"):
        build_team("committee")


@pytest.mark.parametrize("template", sorted(TEMPLATES))
def test_written_templates_pass_the_gate(template, tmp_path):
    root = tmp_path / template
    team = write_template(root, template, backbone="scripted")
    assert team.root == root
    assert team.names == build_team(template).names
    assert check_scaffold(root).accepted
