"""Wire-format helpers: base64 float32 tensors and canonical request bytes."""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np
import torch


def encode_tensor(t) -> dict:
    arr = np.ascontiguousarray(
        t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f4"
    )
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}


def decode_tensor(d: dict) -> torch.Tensor:
    if not isinstance(d, dict) or "shape" not in d or "data" not in d:
        raise ValueError("tensor payload needs 'shape' and 'data'")
    raw = base64.b64decode(d["data"])
    shape = [int(s) for s in d["shape"]]
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expected:
        raise ValueError(f"tensor payload is {len(raw)} bytes, shape says {expected}")
    return torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())


def canonical_request(op: str, payload: dict) -> bytes:
    return json.dumps({"op": op, "payload": payload}, sort_keys=True).encode()


def request_digest(op: str, payload: dict) -> str:
    return hashlib.sha256(canonical_request(op, payload)).hexdigest()
