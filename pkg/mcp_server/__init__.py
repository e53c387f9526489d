"""MCP server package for Meta-Team."""

__version__ = "0.3.0"
