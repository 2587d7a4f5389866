"""Deterministic model suite behind the wire protocol.

Stands in for the pretrained stack (latent diffusion denoiser, image
embedder, caption encoder, monocular depth) with fully deterministic,
seed-derived analytic models, so the protocol and the engine integration
are exercised end to end on any machine.  Real checkpoints can replace
this suite behind the same interface.

The denoiser is an exact Gaussian-mixture posterior over the latent space
whose component means are smooth seeded patterns, evaluated at whatever
latent resolution a request carries.  The autoencoder is 2x average
pooling with bilinear decoding.  All gradients (CFG residual pullbacks,
embedding similarity) are computed server-side with autograd.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F

MODEL_NAME = "analytic-suite-v1"
LATENT_DOWNSAMPLE = 2
EMBED_POOL = 4
N_COMPONENTS = 8
COMPONENT_VARIANCE = 0.03**2
N_HARMONICS = 6


class Schedule:
    """Scaled-linear variance-preserving schedule (t=0 is the clean limit)."""

    def __init__(self, t_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        self.t_max = t_max
        ramp = np.linspace(beta_start**0.5, beta_end**0.5, t_max, dtype=np.float64) ** 2
        signal_sq = np.concatenate([[1.0], np.cumprod(1.0 - ramp)])
        self._alpha = np.sqrt(signal_sq)
        self._sigma = np.sqrt(1.0 - signal_sq)

    def alpha(self, t: int) -> float:
        return float(self._alpha[t])

    def sigma(self, t: int) -> float:
        return float(self._sigma[t])


class ModelSuite:
    def __init__(self, seed: int = 0, t_max: int = 1000):
        self.seed = seed
        self.schedule = Schedule(t_max=t_max)
        rng = np.random.default_rng(seed)
        # per (component, channel, harmonic): frequency pair, phase, amplitude
        self.freqs = rng.integers(1, 4, size=(N_COMPONENTS, 3, N_HARMONICS, 2))
        self.phases = rng.uniform(0, 2 * np.pi, size=(N_COMPONENTS, 3, N_HARMONICS))
        amps = rng.normal(0, 1, size=(N_COMPONENTS, 3, N_HARMONICS))
        self.amps = 0.18 * amps / np.abs(amps).sum(axis=-1, keepdims=True)

    # -- conditioning ------------------------------------------------------
    def condition_id(self, text: str) -> int:
        digest = hashlib.sha256(text.encode()).digest()
        return int.from_bytes(digest[:4], "little") % N_COMPONENTS

    # -- mixture -----------------------------------------------------------
    def component_mean(self, k: int, h: int, w: int) -> torch.Tensor:
        """Smooth deterministic pattern in [0,1], any resolution."""
        v, u = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        img = np.full((h, w, 3), 0.5)
        for c in range(3):
            for j in range(N_HARMONICS):
                fu, fv = self.freqs[k, c, j]
                img[:, :, c] += self.amps[k, c, j] * np.sin(
                    2 * np.pi * (fu * u + fv * v) + self.phases[k, c, j]
                )
        return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))

    def posterior_mean(self, z_t: torch.Tensor, t: int, conditioning_id=None) -> torch.Tensor:
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        h, w = z_t.shape[0], z_t.shape[1]
        ks = range(N_COMPONENTS) if conditioning_id is None else [int(conditioning_id)]
        z = z_t.double().reshape(-1)
        means = [self.component_mean(k, h, w).double().reshape(-1) for k in ks]
        var = COMPONENT_VARIANCE
        marg = a * a * var + s * s
        logs = []
        for m in means:
            diff = z - a * m
            logs.append(-(diff @ diff) / (2 * marg))
        resp = torch.softmax(torch.stack(logs), dim=0)
        shrink = a * var / marg
        post = torch.zeros_like(z)
        for r, m in zip(resp, means):
            post += r * (m + shrink * (z - a * m))
        return post.reshape(z_t.shape).to(z_t.dtype)

    def predict_noise(self, z_t: torch.Tensor, t: int, conditioning_id=None) -> torch.Tensor:
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        return (z_t - a * self.posterior_mean(z_t, t, conditioning_id)) / s

    def predict_noise_cfg(self, z_t, t, conditioning_id, omega: float) -> torch.Tensor:
        if conditioning_id is None or omega == 0.0:
            return self.predict_noise(z_t, t, conditioning_id)
        cond = self.predict_noise(z_t, t, conditioning_id)
        uncond = self.predict_noise(z_t, t, None)
        return (1.0 + omega) * cond - omega * uncond

    # -- latent autoencoder --------------------------------------------------
    def encode(self, image: torch.Tensor) -> torch.Tensor:
        chw = image.permute(2, 0, 1).unsqueeze(0)
        z = F.avg_pool2d(chw, LATENT_DOWNSAMPLE)
        return z[0].permute(1, 2, 0)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        chw = latent.permute(2, 0, 1).unsqueeze(0)
        h, w = latent.shape[0] * LATENT_DOWNSAMPLE, latent.shape[1] * LATENT_DOWNSAMPLE
        img = F.interpolate(chw, size=(h, w), mode="bilinear", align_corners=False)
        return img[0].permute(1, 2, 0)

    def encode_vjp(self, image: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
        x = image.detach().requires_grad_(True)
        (grad,) = torch.autograd.grad(self.encode(x), x, grad_outputs=upstream)
        return grad

    def decode_vjp(self, latent: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
        z = latent.detach().requires_grad_(True)
        (grad,) = torch.autograd.grad(self.decode(z), z, grad_outputs=upstream)
        return grad

    # -- embeddings ----------------------------------------------------------
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        chw = image.permute(2, 0, 1).unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(chw, EMBED_POOL).reshape(-1)
        return pooled / torch.linalg.vector_norm(pooled).clamp_min(1e-12)

    def embed_with_similarity_grad(self, image: torch.Tensor, ref: torch.Tensor):
        x = image.detach().requires_grad_(True)
        e = self.embed(x)
        d12 = (e * ref).sum()
        d11 = (e * e).sum()
        d22 = (ref * ref).sum()
        cos = d12 / torch.sqrt(d11 * d22)
        (grad,) = torch.autograd.grad(cos, x)
        return e.detach(), float(cos.detach()), grad

    # -- depth ----------------------------------------------------------------
    def estimate_depth(self, image: torch.Tensor) -> torch.Tensor:
        # luminance-driven pseudo-depth: positive, deterministic, stub only
        luma = 0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]
        return 0.5 + (1.0 - luma)

    # -- gradients for SDS -----------------------------------------------------
    def sds_pullback(self, z_t, t, conditioning_id, omega, eps, weight):
        """eps_hat plus the image-space pullback of weight * (eps_hat - eps).

        The clean latent is recovered from (z_t, eps) so the encoder
        Jacobian can be evaluated at the image the client actually rendered.
        """
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        eps_hat = self.predict_noise_cfg(z_t, t, conditioning_id, omega)
        residual = weight * (eps_hat - eps)
        z0 = (z_t - s * eps) / a
        image = self.decode(z0)
        grad = self.encode_vjp(image, residual)
        return eps_hat, grad

    def health(self) -> dict:
        return {
            "model": MODEL_NAME,
            "t_max": self.schedule.t_max,
            "latent_downsample": LATENT_DOWNSAMPLE,
            "embed_dim": 3 * EMBED_POOL * EMBED_POOL,
            "components": N_COMPONENTS,
            "seed": self.seed,
        }
