"""
Meta-Team MCP Server

A Model Context Protocol server for inspecting self-evolving agent teams.
Provides tools for browsing indexed experiences, reading episode timelines,
attributing failures in annotated traces and validating team scaffolds.
"""

import asyncio
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Any

import httpx
from mcp.server.fastmcp import FastMCP

from src.attribution import SCHEMES, SchemeConfig
from src.cli import timeline
from src.errors import MetaTeamError
from src.evolution import check_scaffold
from src.model_gateway import ScriptedGateway, WireGateway, load_script
from src.trace_store import import_annotated, load_experience

# Configure logging to stderr for MCP servers
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)

mcp = FastMCP("meta-team")

API_BASE_URL = os.environ.get("METATEAM_INDEX_API", "http://localhost:8000")

# Global HTTP client
http_client: httpx.AsyncClient | None = None


async def get_http_client() -> httpx.AsyncClient:
    """Get or create HTTP client for index API requests."""
    global http_client
    if http_client is None:
        http_client = httpx.AsyncClient(base_url=API_BASE_URL, timeout=30.0)
    return http_client


def _error(e: Exception, kind: str) -> str:
    return json.dumps({"error": str(e), "type": kind})


@mcp.tool()
async def list_experiences(
    limit: int = 10,
    offset: int = 0,
    passed: bool | None = None,
    team_version: int | None = None,
    task_id: str | None = None,
) -> str:
    """
    List indexed experiences from the experience API.

    Args:
        limit: Maximum number of experiences to return (default: 10)
        offset: Number of experiences to skip (default: 0)
        passed: Only passed (true) or failed (false) episodes
        team_version: Only episodes run on this scaffold version
        task_id: Only episodes of this task

    Returns:
        JSON string with query results
    """
    try:
        client = await get_http_client()
        params: dict[str, Any] = {"limit": limit, "offset": offset}
        if passed is not None:
            params["passed"] = str(passed).lower()
        if team_version is not None:
            params["team_version"] = team_version
        if task_id:
            params["task_id"] = task_id

        response = await client.get("/experiences/", params=params)
        response.raise_for_status()

        data = response.json()
        logger.info(f"Retrieved {len(data.get('experiences', []))} experiences")
        return json.dumps(data, indent=2)

    except httpx.HTTPError as e:
        logger.error(f"HTTP error listing experiences: {e}")
        return _error(e, "http_error")
    except Exception as e:
        logger.error(f"Error listing experiences: {e}")
        return _error(e, "unexpected_error")


@mcp.tool()
async def inspect_experience(path: str, agent: str | None = None) -> str:
    """
    Read an experience file and render its timeline.

    Args:
        path: Path to a frozen experience (.jsonl)
        agent: Restrict the timeline to this agent's local trace

    Returns:
        JSON string with the outcome and timeline lines
    """
    try:
        experience = load_experience(path)
        return json.dumps(
            {
                "episode_id": experience.episode_id,
                "agents": list(experience.trajectory.agents),
                "outcome": experience.outcome.model_dump(mode="json"),
                "timeline": timeline(experience, agent),
            },
            indent=2,
        )
    except MetaTeamError as e:
        logger.error(f"Cannot inspect {path}: {e}")
        return _error(e, type(e).__name__)
    except Exception as e:
        logger.error(f"Error inspecting {path}: {e}")
        return _error(e, "unexpected_error")


@mcp.tool()
async def attribute_trace(
    path: str,
    scheme: str = "collab",
    alpha: float = 1.0,
    rounds: int = 1,
    script: str | None = None,
) -> str:
    """
    Attribute the failure in an annotated trace to an (agent, step).

    Args:
        path: Annotated trace (.json or .jsonl) with ground truth
        scheme: One of global, local, collab (default: collab)
        alpha: Weight of disagreement in collaborative voting
        rounds: Re-audit rounds for the collaborative scheme
        script: Scripted backend file; the live gateway is used when omitted

    Returns:
        JSON string with the verdict and whether it matches the annotation
    """
    gateway = None
    try:
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{scheme}'")
        trace = import_annotated(path)
        gateway = ScriptedGateway(load_script(script)) if script else WireGateway()
        verdict = await SCHEMES[scheme](trace, gateway, SchemeConfig(alpha=alpha, rounds=rounds))
        return json.dumps(
            {
                "trace_id": trace.trace_id,
                "scheme": scheme,
                "agent": verdict.mistake_agent,
                "step": verdict.mistake_step,
                "fallback": verdict.fallback,
                "agent_correct": verdict.mistake_agent == trace.mistake_agent,
                "step_correct": verdict.pair == (trace.mistake_agent, trace.mistake_step),
            },
            indent=2,
        )
    except MetaTeamError as e:
        logger.error(f"Attribution of {path} failed: {e}")
        return _error(e, type(e).__name__)
    except Exception as e:
        logger.error(f"Error attributing {path}: {e}")
        return _error(e, "unexpected_error")
    finally:
        if isinstance(gateway, WireGateway):
            await gateway.aclose()


@mcp.tool()
async def validate_team(path: str) -> str:
    """
    Run the commit-gate checks against a team scaffold on disk.

    Args:
        path: Team root directory (holding team.yaml)

    Returns:
        JSON string with each check's result
    """
    try:
        report = check_scaffold(Path(path))
        return json.dumps(report.model_dump(mode="json"), indent=2)
    except Exception as e:
        logger.error(f"Error validating {path}: {e}")
        return _error(e, "unexpected_error")


@mcp.resource("metateam://health")
async def health_resource() -> str:
    """Experience API health as text."""
    try:
        client = await get_http_client()
        response = await client.get("/health/database")
        response.raise_for_status()
        data = response.json()
        return f"Meta-Team experience index\nStatus: {data.get('status', 'unknown')}\n"
    except Exception as e:
        logger.error(f"Error getting health resource: {e}")
        return f"Error retrieving health status: {e}"


@mcp.prompt()
def review_failures_prompt(team_version: int) -> str:
    """
    Generate a prompt for reviewing failed episodes of one scaffold version.

    Args:
        team_version: Scaffold version to review
    """
    return f"""Review the failed episodes of team version {team_version}:

1. List them with list_experiences(passed=false, team_version={team_version})
2. Open each with inspect_experience(path)
3. Where an annotated copy exists, run attribute_trace(path, scheme="collab")
4. Summarize which agents and steps recur as the decisive mistake"""


# Cleanup handlers
async def cleanup() -> None:
    """Clean up resources on shutdown."""
    global http_client
    if http_client:
        await http_client.aclose()
        http_client = None
    logger.info("Meta-Team MCP server shutdown complete")


def signal_handler(signum: int, frame: Any) -> None:
    """Handle shutdown signals."""
    logger.info(f"Received signal {signum}, shutting down gracefully")
    asyncio.create_task(cleanup())
    sys.exit(0)


if __name__ == "__main__":
    signal.signal(signal.SIGTERM, signal_handler)
    signal.signal(signal.SIGINT, signal_handler)
    try:
        logger.info("Starting Meta-Team MCP server")
        mcp.run()
    except KeyboardInterrupt:
        logger.info("Server interrupted by user")
    except Exception as e:
        logger.error(f"Server error: {e}")
    finally:
        asyncio.run(cleanup())
