"""Recording deterministic request/response archives for offline replay.

The archive layout matches what the engine's replay transport consumes:
a zip of response JSON files plus manifest.json binding each canonical
request hash to a response file and its sha256.
"""

from __future__ import annotations

import hashlib
import json
import zipfile

import numpy as np
import torch

from .wire import encode_tensor, request_digest


def write_archive(path, records):
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (op, payload, response) in enumerate(records):
            fname = f"{i:04d}_{op}.json"
            blob = json.dumps(response, sort_keys=True).encode()
            zf.writestr(fname, blob)
            entries.append(
                {
                    "op": op,
                    "request_sha256": request_digest(op, payload),
                    "response_file": fname,
                    "response_sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
        zf.writestr("manifest.json", json.dumps({"entries": entries}, indent=1))


def archive_digest(path) -> str:
    """Stable content digest: response checksums are deterministic for a
    fixed seed, so re-records of the same requests hash identically."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    keyed = sorted(
        (e["request_sha256"], e["response_sha256"]) for e in manifest["entries"]
    )
    return hashlib.sha256(json.dumps(keyed).encode()).hexdigest()


def canonical_requests(image: np.ndarray, seed: int = 0, t: int = 450, omega: float = 7.5):
    """The standard exchange recorded for an image: one of every op."""
    img = torch.from_numpy(np.asarray(image, dtype=np.float32))
    h, w = img.shape[0], img.shape[1]
    lat_h, lat_w = h // 2, w // 2
    rng = np.random.default_rng(seed)
    z_t = torch.from_numpy(rng.normal(0.4, 0.3, (lat_h, lat_w, 3)).astype(np.float32))
    eps = torch.from_numpy(rng.standard_normal((lat_h, lat_w, 3)).astype(np.float32))
    latent = torch.from_numpy(rng.uniform(0, 1, (lat_h, lat_w, 3)).astype(np.float32))
    reqs = [
        ("health", {}),
        ("embed_condition", {"text": "recorded fixture prompt"}),
        ("embed_image", {"image": encode_tensor(img)}),
        ("encode", {"image": encode_tensor(img)}),
        ("decode", {"latent": encode_tensor(latent)}),
        ("predict_noise", {"latent": encode_tensor(z_t), "t": t, "omega": 0.0}),
        (
            "predict_noise",
            {
                "latent": encode_tensor(z_t),
                "t": t,
                "omega": omega,
                "conditioning_id": 1,
                "eps": encode_tensor(eps),
                "weight": 0.5,
            },
        ),
        ("estimate_depth", {"image": encode_tensor(img)}),
    ]
    return reqs


def record_fixtures(transport, images, out_path, seed: int = 0):
    """Run the canonical exchange for each image against a live transport
    and write the replay archive.  Returns the archive digest."""
    records = []
    for i, image in enumerate(images):
        for op, payload in canonical_requests(image, seed=seed + i):
            records.append((op, payload, transport.send(op, payload)))
    write_archive(out_path, records)
    return archive_digest(out_path)
