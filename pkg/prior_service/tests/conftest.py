import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from prior_service.app import create_app


class LocalTransport:
    """In-process transport over the FastAPI test client: zero network."""

    def __init__(self, app):
        self.client = TestClient(app)

    def send(self, op, payload):
        if op == "health":
            resp = self.client.get("/v1/health")
        else:
            resp = self.client.post(f"/v1/{op}", json={"op": op, "payload": payload})
        doc = resp.json()
        if resp.status_code != 200 or "error" in doc:
            raise RuntimeError(f"{op} failed: {resp.status_code} {doc}")
        return doc.get("payload", doc)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def app():
    return create_app(seed=0)


@pytest.fixture()
def transport(app):
    return LocalTransport(app)


@pytest.fixture()
def smooth_image():
    """A natural-looking smooth test image (gradients + soft blobs)."""
    v, u = np.meshgrid(np.linspace(0, 1, 64), np.linspace(0, 1, 64), indexing="ij")
    blob = np.exp(-((u - 0.4) ** 2 + (v - 0.6) ** 2) / 0.05)
    img = np.stack(
        [0.3 + 0.5 * u, 0.2 + 0.5 * v + 0.2 * blob, 0.5 + 0.3 * np.sin(4 * u) * blob],
        axis=-1,
    )
    return np.clip(img, 0, 1).astype(np.float32)
