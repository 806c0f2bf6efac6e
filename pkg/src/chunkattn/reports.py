"""Canonical serialization helpers shared by the planner, simulator, and CLI.

JSON output is canonical (sorted keys, two-space indent, shortest
round-trip float repr) so that parse-then-redump is byte-identical and
files can be compared directly in tests.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def plain(obj):
    """Recursively convert numpy scalars/arrays and tuples to JSON-safe types."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, indent 2, trailing newline."""
    return json.dumps(plain(obj), sort_keys=True, indent=2) + "\n"


def config_hash(obj) -> str:
    """Short content hash tying report rows to the exact run settings."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]
