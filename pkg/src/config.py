"""Configuration constants for the meta-team runtime."""

import os
from pathlib import Path

# Model gateway (endpoint and credentials from the environment)
API_BASE_URL = os.environ.get("METATEAM_API_BASE", "http://localhost:4000/v1")
API_KEY = os.environ.get("METATEAM_API_KEY", "")
DEFAULT_MODEL = os.environ.get("METATEAM_MODEL", "claude-sonnet-4-6")
PRICES_PATH = os.environ.get("METATEAM_PRICES")
GATEWAY_TIMEOUT_SECONDS = 300.0

# Retry policy: 5 attempts, doubling back-off from 1.5 s capped at 60 s
RETRY_MAX_ATTEMPTS = 5
RETRY_BASE_DELAY_SECONDS = 1.5
RETRY_MAX_DELAY_SECONDS = 60.0

# Decoding defaults
DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_OUTPUT_TOKENS = 32768

# Per-million-token prices (input, output) by model id
MODEL_PRICES: dict[str, tuple[str, str]] = {
    "claude-sonnet-4-6": ("3", "15"),
    "claude-opus-4-1": ("15", "75"),
    "gpt-4.1": ("2", "8"),
    "gpt-4.1-mini": ("0.4", "1.6"),
    "scripted": ("0", "0"),
}

# Agent loop
MAX_HISTORY_MESSAGES = 150
MAILBOX_POLL_SECONDS = 1.0
PHASE_STEP_BUDGET = 50
FORCE_FINALIZE_TIMEOUT_SECONDS = 240.0
STALL_POLLS = 30
CLOCK_SETTLE_YIELDS = 32

# Evolution
PHASE_TIMEOUT_SECONDS = 600.0
PHASE_TIMEOUT_RANGE_SECONDS = (300.0, 900.0)
REFLECTION_COST_CAP = "50"
MAX_PATCHES_PER_AGENT = 32
MAX_PATCHES_PER_REFLECTION = 3
MAX_EVIDENCE_QUESTIONS = 3
SUMMARY_MAX_CHARS = 600
EVIDENCE_EXCERPT_CHARS = 200
SKILL_DESCRIPTION_MAX_CHARS = 200

# Attribution
ATTRIBUTION_ALPHA = 1.0
ATTRIBUTION_ROUNDS = 1
LONG_TRACE_TOKEN_THRESHOLD = 128_000
CHARS_PER_TOKEN = 4

# Scaffold layout
TEAM_MANIFEST = "team.yaml"
CONSTITUTION_FILE = "constitution.md"
AGENTS_DIR = "agents"
RETIRED_DIR = "retired"

# Trace files
TRACE_FORMAT_VERSION = 2
FIXED_CLOCK_EPOCH = "2026-01-01T00:00:00+00:00"

# API settings
API_HOST = "0.0.0.0"
API_PORT = 8000
API_TITLE = "Meta-Team Experience API"
API_VERSION = "0.3.0"

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = Path(os.environ.get("METATEAM_DATA_DIR", PROJECT_ROOT / "data"))
BUDGET_PROFILES_PATH = Path(__file__).parent / "budget_profiles.yaml"

# Experience index (SQLAlchemy URL)
INDEX_DB_URL = os.environ.get(
    "METATEAM_INDEX_URL", f"sqlite+aiosqlite:///{DATA_DIR / 'metateam.db'}"
)
SQL_ECHO = False  # Set to True for SQL query logging
