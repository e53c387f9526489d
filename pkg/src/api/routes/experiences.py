"""Experience query endpoints.

Rows come from the index; full trajectories and local traces are read from
the experience files the rows point to.
"""

from fastapi import APIRouter, Depends, HTTPException, Query
from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from ...database import get_db_session
from ...errors import TraceError, UnknownAgent
from ...models import ExperienceRecord
from ...trace_store import experience_lines, load_experience, local_trace
from ...types import Experience

router = APIRouter()


async def _record(episode_id: str, db: AsyncSession) -> ExperienceRecord:
    row = await db.get(ExperienceRecord, episode_id)
    if row is None:
        raise HTTPException(status_code=404, detail=f"Experience {episode_id} not found")
    return row


def _load(row: ExperienceRecord) -> Experience:
    try:
        return load_experience(row.path)
    except TraceError as e:
        raise HTTPException(status_code=422, detail=f"{row.path}: {e}") from e


@router.get("/")
async def list_experiences(
    passed: bool | None = Query(None, description="Filter by evaluation result"),
    team_version: int | None = Query(None, ge=0, description="Filter by scaffold version"),
    task_id: str | None = Query(None, description="Filter by task id"),
    limit: int = Query(100, ge=1, le=1000, description="Maximum results"),
    offset: int = Query(0, ge=0, description="Pagination offset"),
    db: AsyncSession = Depends(get_db_session),
) -> dict:
    """List indexed experiences, oldest first."""
    query = select(ExperienceRecord).order_by(
        ExperienceRecord.created, ExperienceRecord.episode_id
    )
    if passed is not None:
        query = query.where(ExperienceRecord.passed == passed)
    if team_version is not None:
        query = query.where(ExperienceRecord.team_version == team_version)
    if task_id:
        query = query.where(ExperienceRecord.task_id == task_id)

    result = await db.execute(query.limit(limit).offset(offset))
    rows = result.scalars().all()
    return {
        "count": len(rows),
        "limit": limit,
        "offset": offset,
        "experiences": [row.to_dict() for row in rows],
    }


@router.get("/{episode_id}")
async def get_experience(episode_id: str, db: AsyncSession = Depends(get_db_session)) -> dict:
    """Full experience: header, every event and the outcome.

    Raises:
        HTTPException: 404 if the episode is not indexed, 422 if its file is unreadable
    """
    row = await _record(episode_id, db)
    experience = _load(row)
    return {
        "index": row.to_dict(),
        "experience": experience.model_dump(mode="json", by_alias=True),
        "records": len(experience_lines(experience)),
    }


@router.get("/{episode_id}/agents/{agent}")
async def get_local_trace(
    episode_id: str, agent: str, db: AsyncSession = Depends(get_db_session)
) -> dict:
    """One agent's local trace within an experience."""
    experience = _load(await _record(episode_id, db))
    try:
        trace = local_trace(experience.trajectory, agent)
    except UnknownAgent as e:
        raise HTTPException(status_code=404, detail=str(e)) from e
    return {
        "episode_id": episode_id,
        "agent": agent,
        "events": [e.to_record() for e in trace.events],
    }
