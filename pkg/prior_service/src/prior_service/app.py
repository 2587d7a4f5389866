"""FastAPI application exposing the six wire ops.

POST /v1/{op} with {"op", "request_id", "payload"}; GET /v1/health.
Malformed payloads answer 400, model failures 500; the process never
dies on a bad request.
"""

from __future__ import annotations

import logging
import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .models import ModelSuite
from .wire import decode_tensor, encode_tensor

log = logging.getLogger("prior_service")

OPS = ("embed_condition", "embed_image", "encode", "decode", "predict_noise", "estimate_depth")


def create_app(seed: int = 0, t_max: int = 1000) -> FastAPI:
    suite = ModelSuite(seed=seed, t_max=t_max)
    app = FastAPI(title="prior-service")
    app.state.suite = suite

    @app.get("/v1/health")
    def health():
        return suite.health()

    @app.post("/v1/{op}")
    async def dispatch(op: str, request: Request):
        if op not in OPS:
            return JSONResponse({"error": {"code": "unknown-op", "message": op}}, 404)
        try:
            body = await request.json()
            payload = body.get("payload", body)
            result = _handle(suite, op, payload)
        except (KeyError, ValueError, TypeError) as exc:
            return JSONResponse(
                {"error": {"code": "bad-payload", "message": str(exc)}}, 400
            )
        except Exception as exc:  # model failure: report, never crash
            log.exception("op %s failed", op)
            return JSONResponse({"error": {"code": "model-failure", "message": str(exc)}}, 500)
        return {"request_id": body.get("request_id"), "payload": result}

    return app


def _handle(suite: ModelSuite, op: str, payload: dict) -> dict:
    if op == "embed_condition":
        return {"conditioning_id": suite.condition_id(str(payload["text"]))}

    if op == "embed_image":
        image = decode_tensor(payload["image"])
        _check_image(image)
        if "grad_against" in payload:
            ref = decode_tensor(payload["grad_against"])
            emb, cos, grad = suite.embed_with_similarity_grad(image, ref)
            return {
                "embedding": encode_tensor(emb),
                "similarity": cos,
                "similarity_grad": encode_tensor(grad),
            }
        return {"embedding": encode_tensor(suite.embed(image))}

    if op == "encode":
        image = decode_tensor(payload["image"])
        _check_image(image)
        out = {"latent": encode_tensor(suite.encode(image))}
        if "vjp" in payload:
            out["vjp_image"] = encode_tensor(
                suite.encode_vjp(image, decode_tensor(payload["vjp"]))
            )
        return out

    if op == "decode":
        latent = decode_tensor(payload["latent"])
        _check_image(latent)
        out = {"image": encode_tensor(suite.decode(latent))}
        if "vjp" in payload:
            out["vjp_latent"] = encode_tensor(
                suite.decode_vjp(latent, decode_tensor(payload["vjp"]))
            )
        return out

    if op == "predict_noise":
        z_t = decode_tensor(payload["latent"])
        _check_image(z_t)
        t = int(payload["t"])
        if not 1 <= t <= suite.schedule.t_max:
            raise ValueError(f"t={t} outside [1, {suite.schedule.t_max}]")
        conditioning = payload.get("conditioning_id")
        omega = float(payload.get("omega", 0.0))
        if "eps" in payload:
            eps = decode_tensor(payload["eps"])
            if tuple(eps.shape) != tuple(z_t.shape):
                raise ValueError("eps shape does not match the latent")
            weight = float(payload.get("weight", 1.0))
            eps_hat, grad = suite.sds_pullback(z_t, t, conditioning, omega, eps, weight)
            return {"eps_hat": encode_tensor(eps_hat), "image_grad": encode_tensor(grad)}
        return {"eps_hat": encode_tensor(suite.predict_noise_cfg(z_t, t, conditioning, omega))}

    if op == "estimate_depth":
        image = decode_tensor(payload["image"])
        _check_image(image)
        return {"depth": encode_tensor(suite.estimate_depth(image))}

    raise ValueError(f"unhandled op {op}")


def _check_image(t):
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) tensor, got {tuple(t.shape)}")


def main_app() -> FastAPI:
    """Entry point for ``uvicorn prior_service.app:main_app --factory``."""
    return create_app(
        seed=int(os.environ.get("PRIOR_SERVICE_SEED", "0")),
        t_max=int(os.environ.get("PRIOR_SERVICE_TMAX", "1000")),
    )
