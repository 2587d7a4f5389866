"""Client for the sidecar prior service, plus record/replay transports.

The wire protocol is JSON over HTTP: ``POST /v1/{op}`` with
``{"op", "request_id", "payload"}`` envelopes, tensors as base64
little-endian float32 with explicit shape.  The service performs CFG and
the heavy Jacobian pullbacks server-side, so one SDS step costs one
round trip.

Contract tests replay recorded request/response archives with zero
network; archives are checksummed so tampering fails loudly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
import uuid
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import PriorBackendError, ValidationError
from .prior import PriorBackend
from .schedule import NoiseSchedule


def encode_tensor(t) -> dict:
    arr = np.ascontiguousarray(
        t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f4"
    )
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}


def decode_tensor(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).copy()
    return torch.from_numpy(arr)


def canonical_request(op: str, payload: dict) -> bytes:
    return json.dumps({"op": op, "payload": payload}, sort_keys=True).encode()


class HttpTransport:
    """Plain HTTP/1.1 transport to a running prior service."""

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s

    def send(self, op: str, payload: dict) -> dict:
        import requests

        if op == "health":
            resp = requests.get(f"{self.endpoint}/v1/health", timeout=self.timeout_s)
        else:
            body = {"op": op, "request_id": str(uuid.uuid4()), "payload": payload}
            resp = requests.post(
                f"{self.endpoint}/v1/{op}", json=body, timeout=self.timeout_s
            )
        if resp.status_code != 200:
            raise PriorBackendError(f"{op} failed: HTTP {resp.status_code} {resp.text[:200]}")
        doc = resp.json()
        if "error" in doc:
            raise PriorBackendError(f"{op} failed: {doc['error']}")
        return doc.get("payload", doc)


class ReplayTransport:
    """Serves responses from a recorded fixture archive (no network).

    The archive is a zip of response JSON files plus a manifest binding
    each canonical request hash to a response file and its checksum.
    """

    def __init__(self, archive_path):
        self.path = Path(archive_path)
        with zipfile.ZipFile(self.path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            self.entries = {}
            for entry in manifest["entries"]:
                blob = zf.read(entry["response_file"])
                digest = hashlib.sha256(blob).hexdigest()
                if digest != entry["response_sha256"]:
                    raise ValidationError(
                        f"fixture archive entry {entry['response_file']} fails its "
                        f"checksum (tampered or corrupt)",
                        code="fixture-checksum",
                    )
                self.entries[entry["request_sha256"]] = json.loads(blob)

    def send(self, op: str, payload: dict) -> dict:
        key = hashlib.sha256(canonical_request(op, payload)).hexdigest()
        if key not in self.entries:
            raise PriorBackendError(f"no recorded response for {op} request {key[:12]}...")
        return self.entries[key]


class RecordingTransport:
    """Wraps a live transport and captures every exchange for replay."""

    def __init__(self, inner):
        self.inner = inner
        self.records: list[tuple[str, dict, dict]] = []

    def send(self, op: str, payload: dict) -> dict:
        response = self.inner.send(op, payload)
        self.records.append((op, payload, response))
        return response

    def write_archive(self, path):
        write_archive(path, self.records)


def write_archive(path, records):
    """records: iterable of (op, request payload, response payload)."""
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (op, payload, response) in enumerate(records):
            fname = f"{i:04d}_{op}.json"
            blob = json.dumps(response, sort_keys=True).encode()
            zf.writestr(fname, blob)
            entries.append(
                {
                    "op": op,
                    "request_sha256": hashlib.sha256(canonical_request(op, payload)).hexdigest(),
                    "response_file": fname,
                    "response_sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
        zf.writestr("manifest.json", json.dumps({"entries": entries}, indent=1))


class RemoteBackend(PriorBackend):
    """PriorBackend speaking the sidecar wire protocol.

    Gradient-bearing ops are overridden so every Jacobian pullback happens
    server-side; the engine only ever sees plain tensors.
    """

    def __init__(self, endpoint_or_transport, timeout_s: float = 30.0, retries: int = 3):
        if isinstance(endpoint_or_transport, str):
            self.transport = HttpTransport(endpoint_or_transport, timeout_s)
        else:
            self.transport = endpoint_or_transport
        self.retries = retries

    def _call(self, op: str, payload: dict) -> dict:
        delay = 0.2
        last = None
        for attempt in range(self.retries):
            try:
                return self.transport.send(op, payload)
            except PriorBackendError:
                raise  # service answered with an error: not retryable
            except Exception as exc:  # connection trouble: back off and retry
                last = exc
                if attempt + 1 < self.retries:
                    time.sleep(delay)
                    delay *= 2
        raise PriorBackendError(f"{op} failed after {self.retries} attempts: {last}")

    def health(self) -> dict:
        return self._call("health", {})

    def validate_schedule(self, schedule: NoiseSchedule) -> dict:
        info = self.health()
        if int(info.get("t_max", -1)) != schedule.t_max:
            raise PriorBackendError(
                f"service t_max={info.get('t_max')} does not match engine "
                f"schedule t_max={schedule.t_max}"
            )
        return info

    def embed_condition(self, condition):
        if condition is None:
            return None
        if isinstance(condition, (int, np.integer)):
            return int(condition)
        resp = self._call("embed_condition", {"text": str(condition)})
        return int(resp["conditioning_id"])

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        return decode_tensor(self._call("encode", {"image": encode_tensor(image)})["latent"])

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return decode_tensor(self._call("decode", {"latent": encode_tensor(latent)})["image"])

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        resp = self._call("embed_image", {"image": encode_tensor(image)})
        return decode_tensor(resp["embedding"])

    def estimate_depth(self, image: torch.Tensor) -> torch.Tensor:
        return decode_tensor(self._call("estimate_depth", {"image": encode_tensor(image)})["depth"])

    def predict_noise(self, z_t: torch.Tensor, conditioning, t: int) -> torch.Tensor:
        payload = {"latent": encode_tensor(z_t), "t": int(t), "omega": 0.0}
        if conditioning is not None:
            payload["conditioning_id"] = int(conditioning)
        return decode_tensor(self._call("predict_noise", payload)["eps_hat"])

    def predict_noise_cfg(self, z_t, conditioning, t, omega):
        payload = {"latent": encode_tensor(z_t), "t": int(t), "omega": float(omega)}
        if conditioning is not None:
            payload["conditioning_id"] = int(conditioning)
        return decode_tensor(self._call("predict_noise", payload)["eps_hat"])

    def sds_image_gradient(self, schedule, image, conditioning, t, eps, omega, weight):
        z0 = self.encode_image(image)
        if eps.shape != z0.shape:
            raise ValidationError(f"noise shape {tuple(eps.shape)} != latent {tuple(z0.shape)}")
        z_t = schedule.add_noise(z0, t, eps)
        payload = {
            "latent": encode_tensor(z_t),
            "t": int(t),
            "omega": float(omega),
            "eps": encode_tensor(eps),
            "weight": float(weight),
        }
        if conditioning is not None:
            payload["conditioning_id"] = int(conditioning)
        resp = self._call("predict_noise", payload)
        if "image_grad" not in resp:
            raise PriorBackendError("service did not return the image-space pullback")
        return decode_tensor(resp["image_grad"]).to(image.dtype)

    def clip_similarity_grad(self, image, ref_embedding):
        resp = self._call(
            "embed_image",
            {"image": encode_tensor(image), "grad_against": encode_tensor(ref_embedding)},
        )
        return (
            torch.tensor(float(resp["similarity"]), dtype=image.dtype),
            decode_tensor(resp["similarity_grad"]).to(image.dtype),
        )

    def denoised_image_gradient(self, schedule, image, ref_embedding, conditioning,
                                t, eps, omega):
        alpha, sigma = schedule.alpha(t), schedule.sigma(t)
        z0 = self.encode_image(image)
        z_t = schedule.add_noise(z0, t, eps)
        eps_hat = self.predict_noise_cfg(z_t, conditioning, t, omega)
        z0_hat = (z_t - sigma * eps_hat) / alpha
        x0_hat = self.decode_latent(z0_hat).clamp(0.0, 1.0)
        sim, sim_grad = self.clip_similarity_grad(x0_hat, ref_embedding)
        # pull d(-sim)/d(x0_hat) back through decode, the one-step map, encode
        vjp_latent = decode_tensor(
            self._call(
                "decode",
                {"latent": encode_tensor(z0_hat), "vjp": encode_tensor(-sim_grad)},
            )["vjp_latent"]
        )
        vjp_image = decode_tensor(
            self._call(
                "encode",
                {"image": encode_tensor(image), "vjp": encode_tensor(vjp_latent)},
            )["vjp_image"]
        )
        return -sim, vjp_image.to(image.dtype), x0_hat
