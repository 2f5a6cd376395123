"""Binary file container shared by checkpoints and perturbation files.

Layout: 8-byte magic ``UATFORGE``, little-endian u32 format version,
u32 header length, UTF-8 JSON header (carries a ``kind`` tag and the
payload length), then the payload as little-endian float64.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"UATFORGE"
VERSION = 1
_PREFIX_LEN = len(MAGIC) + 8  # magic + version + header length


def write_container(path, kind: str, header: dict, payload: np.ndarray) -> None:
    header = dict(header)
    header["kind"] = kind
    header["payload_len"] = int(payload.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def read_container(path, expect_kind: str | None = None) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX_LEN:
        raise CheckpointError(f"{path}: truncated file, no header")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a {MAGIC.decode()} file")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    if len(data) < _PREFIX_LEN + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX_LEN : _PREFIX_LEN + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload_len = int(header.get("payload_len", -1))
    if payload_len < 0:
        raise CheckpointError(f"{path}: header missing payload length")
    end = _PREFIX_LEN + hlen + payload_len * 8
    if len(data) < end:
        raise CheckpointError(f"{path}: truncated payload")
    if len(data) > end:
        raise CheckpointError(f"{path}: trailing bytes after payload")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: kind {header.get('kind')!r}, expected {expect_kind!r}")
    payload = np.frombuffer(data[_PREFIX_LEN + hlen : end], dtype="<f8").copy()
    return header, payload
