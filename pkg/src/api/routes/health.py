"""Health check endpoints."""

from fastapi import APIRouter, Depends
from sqlalchemy import case, func, select, text
from sqlalchemy.ext.asyncio import AsyncSession

from ... import __version__, config
from ...database import get_db_session
from ...models import CommitRecord, ExperienceRecord

router = APIRouter()


def _tally(flag):
    return func.coalesce(func.sum(case((flag.is_(True), 1), else_=0)), 0)


@router.get("/")
async def health_check():
    return {
        "status": "healthy",
        "service": "meta-team",
        "version": __version__,
    }


@router.get("/database")
async def database_health(db: AsyncSession = Depends(get_db_session)):
    """Check that the experience index answers queries.

    Args:
        db: Database session (injected)

    Returns:
        Index connection status
    """
    try:
        await db.execute(text("SELECT 1"))
        return {
            "status": "healthy",
            "service": "index",
            "url": config.INDEX_DB_URL.split("@")[-1],
        }
    except Exception as e:
        return {
            "status": "unhealthy",
            "service": "index",
            "error": str(e),
        }


@router.get("/index")
async def index_summary(db: AsyncSession = Depends(get_db_session)):
    """Row counts and the newest scaffold version seen in the index."""
    experiences = await db.execute(
        select(
            func.count(ExperienceRecord.episode_id),
            _tally(ExperienceRecord.passed),
            func.max(ExperienceRecord.team_version),
        )
    )
    total, passed, latest = experiences.one()
    commits = await db.execute(
        select(
            func.count(CommitRecord.id),
            _tally(CommitRecord.committed),
        )
    )
    audited, committed = commits.one()
    return {
        "experiences": total,
        "passed": passed,
        "latest_team_version": latest,
        "audit_entries": audited,
        "commits": committed,
    }
