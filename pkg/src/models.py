"""SQLAlchemy models for the experience index.

The index is a queryable catalogue over frozen experience files and the
evolution audit trail; the JSONL files stay the source of truth.
"""

from datetime import datetime

from sqlalchemy import JSON, Boolean, DateTime, Float, Index, Integer, String
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column


class Base(DeclarativeBase):
    """Base class for all SQLAlchemy models."""

    pass


class ExperienceRecord(Base):
    """One frozen episode experience."""

    __tablename__ = "experiences"

    episode_id: Mapped[str] = mapped_column(String(255), primary_key=True)
    team_version: Mapped[int] = mapped_column(Integer, nullable=False, index=True)
    task_id: Mapped[str] = mapped_column(String(255), nullable=False, index=True)
    path: Mapped[str] = mapped_column(String(1024), nullable=False)
    finalized_by: Mapped[str] = mapped_column(String(255), nullable=False)
    end_reason: Mapped[str] = mapped_column(String(32), nullable=False)
    score: Mapped[float | None] = mapped_column(Float, nullable=True)
    passed: Mapped[bool] = mapped_column(Boolean, nullable=False, index=True)
    event_count: Mapped[int] = mapped_column(Integer, nullable=False)
    # decimal text, exact to the micro-unit
    total_cost: Mapped[str] = mapped_column(String(32), nullable=False)
    agents: Mapped[list[str]] = mapped_column(JSON, nullable=False, default=list)
    retry_of: Mapped[str | None] = mapped_column(String(255), nullable=True)
    created: Mapped[datetime] = mapped_column(DateTime(timezone=True), nullable=False)

    __table_args__ = (Index("idx_experience_version_passed", "team_version", "passed"),)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "team_version": self.team_version,
            "task_id": self.task_id,
            "path": self.path,
            "finalized_by": self.finalized_by,
            "end_reason": self.end_reason,
            "score": self.score,
            "passed": self.passed,
            "event_count": self.event_count,
            "total_cost": self.total_cost,
            "agents": self.agents,
            "retry_of": self.retry_of,
            "created": self.created.isoformat(),
        }


class CommitRecord(Base):
    """One evolution step: gate result and whether the scaffold changed."""

    __tablename__ = "commits"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    episode_id: Mapped[str] = mapped_column(String(255), nullable=False, index=True)
    version_before: Mapped[int] = mapped_column(Integer, nullable=False)
    version_after: Mapped[int] = mapped_column(Integer, nullable=False, index=True)
    accepted: Mapped[bool] = mapped_column(Boolean, nullable=False)
    committed: Mapped[bool] = mapped_column(Boolean, nullable=False)
    retried: Mapped[bool] = mapped_column(Boolean, nullable=False, default=False)
    checks: Mapped[list[dict]] = mapped_column(JSON, nullable=False, default=list)
    evolution_cost: Mapped[str] = mapped_column(String(32), nullable=False)
    created: Mapped[datetime] = mapped_column(DateTime(timezone=True), nullable=False)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "episode_id": self.episode_id,
            "version_before": self.version_before,
            "version_after": self.version_after,
            "accepted": self.accepted,
            "committed": self.committed,
            "retried": self.retried,
            "checks": self.checks,
            "evolution_cost": self.evolution_cost,
            "created": self.created.isoformat(),
        }
