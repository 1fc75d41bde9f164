"""
_common.py
----------
Shared utilities for the ML2R toolkit: repository paths, .env defaults,
JSON documents, logging setup and the exception base class.
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values

PACKAGE_DIR = Path(__file__).resolve().parent
REPO_ROOT = PACKAGE_DIR.parent
CONFIGS_DIR = REPO_ROOT / "configs"
ENV_PATH = REPO_ROOT / ".env"

DEFAULT_SEED = 20150101
DEFAULT_OUTPUT_DIR = "results"
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


class ML2RError(Exception):
    """Base class for toolkit errors."""


# ── Environment ──────────────────────────────────────────────────────────────

def load_env(env_path: Optional[Path] = None) -> dict:
    """Load .env values; process environment variables take precedence."""
    path = Path(env_path) if env_path else ENV_PATH
    values = {k: v for k, v in dotenv_values(path).items() if v is not None} if path.exists() else {}
    for key in list(values):
        if key in os.environ:
            values[key] = os.environ[key]
    for key, value in os.environ.items():
        if key.startswith("ML2R_"):
            values[key] = value
    return values


def env_int(name: str, default: int, env: Optional[dict] = None) -> int:
    env = load_env() if env is None else env
    raw = env.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got '{raw}'")


def env_str(name: str, default: str, env: Optional[dict] = None) -> str:
    env = load_env() if env is None else env
    return env.get(name) or default


# ── Logging ──────────────────────────────────────────────────────────────────

def setup_logging(level: str | int = "WARNING"):
    """Configure root logging once for CLI use."""
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def verbosity_to_level(verbose: int, default: str = "WARNING") -> str:
    if verbose >= 2:
        return "DEBUG"
    if verbose == 1:
        return "INFO"
    return default


# ── JSON documents ───────────────────────────────────────────────────────────

def load_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Config document not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {path}: {e}")
    if not isinstance(doc, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return doc


def save_document(path: str | Path, doc: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def check_keys(doc: dict, allowed: set[str], where: str):
    """Reject unknown keys in a config document."""
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ValueError(f"Unknown key(s) in {where}: {', '.join(unknown)}")


def resolve_config_path(name_or_path: str) -> Path:
    """Accept either a path or a bare name under configs/ (with or without .json)."""
    path = Path(name_or_path)
    if path.exists():
        return path
    for candidate in (CONFIGS_DIR / name_or_path, CONFIGS_DIR / f"{name_or_path}.json"):
        if candidate.exists():
            return candidate
    raise ValueError(f"Config not found: '{name_or_path}' (looked in {CONFIGS_DIR})")

