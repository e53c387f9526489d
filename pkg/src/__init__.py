"""Self-evolving open-roster agent teams."""

__version__ = "0.3.0"
