"""API route modules.

- health: service and index health
- experiences: frozen experiences and local traces
- commits: evolution audit trail
"""

from . import commits, experiences, health

__all__ = ["health", "experiences", "commits"]
