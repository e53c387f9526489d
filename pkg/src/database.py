"""Database connection, session management and the experience index."""

from collections.abc import AsyncGenerator
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING

from sqlalchemy import select
from sqlalchemy.engine import make_url
from sqlalchemy.ext.asyncio import (
    AsyncEngine,
    AsyncSession,
    async_sessionmaker,
    create_async_engine,
)

from . import config
from .models import Base, CommitRecord, ExperienceRecord
from .types import Experience

if TYPE_CHECKING:
    from .evolution import AuditEntry

# Engine for the configured index; connects lazily
engine: AsyncEngine = create_async_engine(config.INDEX_DB_URL, echo=config.SQL_ECHO)

EPOCH = datetime.fromisoformat(config.FIXED_CLOCK_EPOCH)

async_session_maker = async_sessionmaker(
    engine,
    class_=AsyncSession,
    expire_on_commit=False,
)


async def get_db_session() -> AsyncGenerator[AsyncSession, None]:
    """Dependency for FastAPI to inject database sessions.

    Example:
        ```python
        @app.get("/experiences")
        async def list_experiences(db: AsyncSession = Depends(get_db_session)):
            result = await db.execute(select(ExperienceRecord))
            return result.scalars().all()
        ```
    """
    async with async_session_maker() as session:
        try:
            yield session
            await session.commit()
        except Exception:
            await session.rollback()
            raise
        finally:
            await session.close()


def _ensure_sqlite_dir(bind: AsyncEngine) -> None:
    url = make_url(str(bind.url))
    if url.get_backend_name() == "sqlite" and url.database not in (None, "", ":memory:"):
        Path(url.database).parent.mkdir(parents=True, exist_ok=True)


async def init_database(bind: AsyncEngine = engine) -> None:
    """Create the index tables if they don't exist."""
    _ensure_sqlite_dir(bind)
    async with bind.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def close_database(bind: AsyncEngine = engine) -> None:
    await bind.dispose()


class ExperienceIndex:
    """Catalogue of frozen experiences and evolution commits."""

    def __init__(self, bind: AsyncEngine = engine):
        self.engine = bind
        self.sessions = async_sessionmaker(bind, class_=AsyncSession, expire_on_commit=False)

    @classmethod
    def from_url(cls, url: str) -> "ExperienceIndex":
        return cls(create_async_engine(url, echo=config.SQL_ECHO))

    async def init(self) -> None:
        await init_database(self.engine)

    async def close(self) -> None:
        await close_database(self.engine)

    async def record_experience(self, experience: Experience, path: str | Path) -> None:
        """Add or refresh the row for one experience file."""
        outcome = experience.outcome
        events = experience.trajectory.events
        row = ExperienceRecord(
            episode_id=experience.episode_id,
            team_version=experience.team_version,
            task_id=experience.task.id,
            path=str(path),
            finalized_by=outcome.finalized_by,
            end_reason=outcome.reason.value,
            score=outcome.score,
            passed=outcome.passed,
            event_count=len(events),
            total_cost=str(experience.total_cost),
            agents=list(experience.trajectory.agents),
            retry_of=experience.retry_of,
            created=events[-1].timestamp if events else EPOCH,
        )
        async with self.sessions() as session:
            await session.merge(row)
            await session.commit()

    async def record_commit(self, entry: "AuditEntry") -> None:
        row = CommitRecord(
            episode_id=entry.episode_id,
            version_before=entry.version_before,
            version_after=entry.version_after,
            accepted=entry.report.accepted if entry.report else False,
            committed=entry.committed,
            retried=entry.retried,
            checks=[c.model_dump(mode="json") for c in entry.report.checks] if entry.report else [],
            evolution_cost=str(entry.evolution_cost),
            created=entry.created,
        )
        async with self.sessions() as session:
            session.add(row)
            await session.commit()

    async def experiences(
        self,
        passed: bool | None = None,
        team_version: int | None = None,
        task_id: str | None = None,
        limit: int = 100,
        offset: int = 0,
    ) -> list[ExperienceRecord]:
        query = select(ExperienceRecord).order_by(
            ExperienceRecord.created, ExperienceRecord.episode_id
        )
        if passed is not None:
            query = query.where(ExperienceRecord.passed == passed)
        if team_version is not None:
            query = query.where(ExperienceRecord.team_version == team_version)
        if task_id is not None:
            query = query.where(ExperienceRecord.task_id == task_id)
        async with self.sessions() as session:
            result = await session.execute(query.limit(limit).offset(offset))
            return list(result.scalars().all())

    async def experience(self, episode_id: str) -> ExperienceRecord | None:
        async with self.sessions() as session:
            return await session.get(ExperienceRecord, episode_id)

    async def commits(self, limit: int = 100, offset: int = 0) -> list[CommitRecord]:
        query = select(CommitRecord).order_by(CommitRecord.id).limit(limit).offset(offset)
        async with self.sessions() as session:
            result = await session.execute(query)
            return list(result.scalars().all())
