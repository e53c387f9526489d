"""Starting teams for evolution runs."""

import logging
from pathlib import Path

from pydantic import BaseModel

from . import config
from .scaffold_store import AgentConfig, AgentScaffold, TeamScaffold, load_team, save_team

logger = logging.getLogger(__name__)

CONSTITUTION = """# Team constitution

We solve the task as one team. Each member owns its role and says so when a request
falls outside it.
Messages are short and concrete: what was done, what is needed, from whom.
Only the agent that owns the deliverable calls finalize, and only after the work has been checked.
"""


class RoleSpec(BaseModel):
    name: str
    title: str
    duties: str


class TemplateSpec(BaseModel):
    entry: str
    roles: list[RoleSpec]
    organization: str = ""


def _role(name: str, title: str, duties: str) -> RoleSpec:
    return RoleSpec(name=name, title=title, duties=duties)


TEMPLATES: dict[str, TemplateSpec] = {
    "swe": TemplateSpec(
        entry="planner",
        roles=[
            _role(
                "planner",
                "Planner",
                "Break the issue into steps, brief the developer, and finalize once the "
                "reviewer approves.",
            ),
            _role(
                "developer",
                "Developer",
                "Implement the planned change and report the diff to the reviewer.",
            ),
            _role(
                "reviewer",
                "Reviewer",
                "Check the developer's diff against the task and report findings to the planner.",
            ),
        ],
        organization="planner -> developer -> reviewer -> planner",
    ),
    "orchestrator-workers": TemplateSpec(
        entry="chairman",
        roles=[
            _role(
                "chairman",
                "Chairman",
                "Split the task, recruit workers with clear briefs, merge their results "
                "and finalize.",
            ),
            *(
                _role(f"worker-{i}", "Worker", "Complete your sub-task and report back.")
                for i in (1, 2, 3)
            ),
        ],
        organization="The chairman assigns sub-tasks; workers report only to the chairman.",
    ),
    "research": TemplateSpec(
        entry="planner",
        roles=[
            _role(
                "planner",
                "Planner",
                "Plan the investigation, delegate file analysis and web search, and finalize.",
            ),
            _role(
                "file-analyzer",
                "File Analyzer",
                "Read the attached files and extract what the plan asks for.",
            ),
            _role(
                "web-searcher",
                "Web Searcher",
                "Find and cite external sources for the questions you are given.",
            ),
            _role(
                "summarizer",
                "Summarizer",
                "Condense the gathered findings into the final answer for the planner.",
            ),
        ],
    ),
    "single": TemplateSpec(
        entry="solver",
        roles=[_role("solver", "Solver", "Solve the task on your own and finalize the answer.")],
    ),
}


def build_team(template: str, name: str | None = None, backbone: str | None = None) -> TeamScaffold:
    """In-memory team for ``template``."""
    try:
        spec = TEMPLATES[template]
    except KeyError:
        raise ValueError(
            f"unknown template '{template}'; known: {', '.join(sorted(TEMPLATES))}"
        ) from None
    pool = [
        AgentScaffold(
            name=role.name,
            role_prompt=f"# {role.title}\n\n{role.duties}\n",
            config=AgentConfig(backbone=backbone or config.DEFAULT_MODEL),
        )
        for role in spec.roles
    ]
    return TeamScaffold(
        name=name or template,
        entry_agent=spec.entry,
        pool=pool,
        constitution=CONSTITUTION,
        organization=spec.organization,
    )


def write_template(
    path: str | Path, template: str, name: str | None = None, backbone: str | None = None
) -> TeamScaffold:
    """Scaffold a starting team at ``path`` and load it back."""
    team = build_team(template, name, backbone)
    save_team(team, path)
    logger.info(f"Wrote {template} team with {len(team.pool)} agents to {path}")
    return load_team(path)
