"""FastAPI application entry point for the experience index.

Read-only REST API over frozen experiences and the evolution audit trail.
"""

from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import config
from ..database import close_database, init_database
from .routes import commits, experiences, health


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Create the index tables on startup and dispose of the engine on shutdown."""
    await init_database()
    yield
    await close_database()


app = FastAPI(
    title=config.API_TITLE,
    version=config.API_VERSION,
    description="Query frozen team experiences and evolution commits",
    lifespan=lifespan,
)

app.include_router(health.router, prefix="/health", tags=["health"])
app.include_router(experiences.router, prefix="/experiences", tags=["experiences"])
app.include_router(commits.router, prefix="/commits", tags=["commits"])


@app.get("/")
async def root():
    """API metadata and available endpoints."""
    return JSONResponse(
        content={
            "name": config.API_TITLE,
            "version": config.API_VERSION,
            "description": "Experience index for self-evolving agent teams",
            "endpoints": {
                "health": "/health",
                "experiences": "/experiences",
                "commits": "/commits",
                "docs": "/docs",
            },
        }
    )


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("src.api.main:app", host=config.API_HOST, port=config.API_PORT)
