"""Evolution audit trail endpoints."""

from fastapi import APIRouter, Depends, Query
from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from ...database import get_db_session
from ...models import CommitRecord

router = APIRouter()


@router.get("/")
async def list_commits(
    episode_id: str | None = Query(None, description="Filter by episode"),
    committed: bool | None = Query(None, description="Only commits that changed the scaffold"),
    limit: int = Query(100, ge=1, le=1000, description="Maximum results"),
    offset: int = Query(0, ge=0, description="Pagination offset"),
    db: AsyncSession = Depends(get_db_session),
) -> dict:
    """Audit entries in the order they were recorded."""
    query = select(CommitRecord).order_by(CommitRecord.id)
    if episode_id:
        query = query.where(CommitRecord.episode_id == episode_id)
    if committed is not None:
        query = query.where(CommitRecord.committed == committed)

    result = await db.execute(query.limit(limit).offset(offset))
    rows = result.scalars().all()
    return {
        "count": len(rows),
        "limit": limit,
        "offset": offset,
        "commits": [row.to_dict() for row in rows],
    }
