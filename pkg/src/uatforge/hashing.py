"""Stable short hashes for configs and emitted files."""

import dataclasses
import hashlib
import json
from pathlib import Path


def canonical_hash(obj, length: int = 12) -> str:
    """Short sha256 of an object's canonical JSON form."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:length]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
