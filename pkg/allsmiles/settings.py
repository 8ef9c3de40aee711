"""
Environment settings
Reads `.env` once and exposes the few knobs the library honours.
"""

import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv

from allsmiles.errors import ConfigError

load_dotenv()

PACKAGE_DIR = Path(__file__).resolve().parent


def data_dir() -> Path:
    """Directory holding the bundled element and corpus files"""
    override = os.getenv('ALLSMILES_DATA_DIR')
    return Path(override) if override else PACKAGE_DIR / 'data'


def thread_count() -> int:
    """Worker cap from ALLSMILES_THREADS (defaults to the CPU count)"""
    raw = os.getenv('ALLSMILES_THREADS', '').strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            return 1
    return max(1, os.cpu_count() or 1)


def log_level() -> str:
    return os.getenv('ALLSMILES_LOG_LEVEL', 'INFO').upper()


def from_mapping(cls, data: Optional[Mapping[str, Any]]):
    """Build a config dataclass from a dict, rejecting keys it does not declare"""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'unknown keys for {cls.__name__}: {unknown}', keys=unknown)
    config = cls(**data)
    validate = getattr(config, 'validate', None)
    if validate is not None:
        validate()
    return config
