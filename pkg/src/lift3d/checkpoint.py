"""Versioned, checksummed binary checkpoints.

Layout: magic "L3DC" + u32 version + u64 header length + header JSON +
payload bytes.  The header carries the artifact kind, the full effective
config, its hash, and a sha256 of the payload so truncation or tampering
is detected before anything is deserialized.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import torch

from .errors import CheckpointError

MAGIC = b"L3DC"
VERSION = 1

KIND_FIELD = "field"
KIND_REFINE = "refine"


def save_checkpoint(path, kind: str, config: dict, tensors: dict):
    """Atomically write a checkpoint (tensors: name -> torch tensor)."""
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() if torch.is_tensor(v) else v for k, v in tensors.items()}, buf)
    payload = buf.getvalue()
    header = json.dumps(
        {
            "kind": kind,
            "config": config,
            "config_hash": hashlib.sha256(
                json.dumps(config, sort_keys=True).encode()
            ).hexdigest(),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_kind: str | None = None):
    """Load and verify a checkpoint; returns (kind, config, tensors)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", code="missing-file")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a lift3d checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (want {VERSION})")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path} truncated inside the header")
    header = json.loads(blob[16 : 16 + hlen])
    payload = blob[16 + hlen :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path} failed its payload checksum (corrupt or truncated)")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(
            f"{path} holds a {header['kind']!r} checkpoint, expected {expect_kind!r}",
            code="wrong-kind",
        )
    tensors = torch.load(io.BytesIO(payload), weights_only=False)
    return header["kind"], header["config"], tensors
