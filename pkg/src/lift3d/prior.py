"""Diffusion-prior machinery: guidance, SDS gradients, denoised previews.

The prior is consumed through :class:`PriorBackend`, which any denoiser
provider implements.  :class:`AnalyticOracleBackend` is a closed-form
Gaussian-mixture implementation used for desk-scale verification; the
remote client in :mod:`lift3d.remote` speaks the same interface to a
sidecar service hosting real pretrained models.

All images are (H, W, 3) torch tensors in [0, 1].  The prior is always a
frozen critic: no gradient ever flows through ``predict_noise``.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, PriorBackendError, ValidationError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free-guidance weight and timestep routing."""

    omega: float = 10.0
    t_min: int = 200
    t_max: int = 600
    t_star: int = 400  # below: CLIP-D, at/above: SDS
    w_mode: str = "sigma2"

    def __post_init__(self):
        # t_star == t_min expresses the SDS-only ablation (CLIP-D never fires)
        if not 0 <= self.t_min <= self.t_star <= self.t_max:
            raise ValidationError(
                f"need 0 <= t_min <= t_star <= t_max, got {self.t_min}, {self.t_star}, {self.t_max}"
            )
        if self.omega < 0:
            raise ValidationError("omega must be >= 0")
        if self.w_mode not in ("sigma2", "one"):
            raise ValidationError(f"unknown w_mode {self.w_mode!r}")


def select_prior_loss(config: GuidanceConfig, t: int) -> str:
    """Route a timestep to exactly one prior loss: 'clip_d' or 'sds'.

    The boundary t == t_star belongs to SDS.
    """
    if not config.t_min <= t <= config.t_max:
        raise ValidationError(f"t={t} outside sampling range [{config.t_min}, {config.t_max}]")
    return "clip_d" if t < config.t_star else "sds"


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Classifier-free guidance: (1 + w) * cond - w * uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValidationError("cfg_combine shape mismatch")
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def _unit_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # dot / sqrt(dot * dot) is exactly 1.0 for bitwise-identical inputs,
    # and makes the value invariant to positive rescaling of either side.
    d12 = (a * b).sum()
    d11 = (a * a).sum()
    d22 = (b * b).sum()
    denom = torch.sqrt(d11 * d22)
    if denom.item() == 0.0:
        raise ValidationError("zero-norm embedding")
    return d12 / denom


class PriorBackend(ABC):
    """Score/denoiser + embedding + conditioning provider.

    ``predict_noise`` et al. are the primitive ops; the gradient-producing
    helpers below are default compositions that subclasses with remote
    Jacobians override to keep the heavy pullbacks on their side.
    """

    @abstractmethod
    def predict_noise(self, z_t: torch.Tensor, conditioning, t: int) -> torch.Tensor:
        """Predicted noise for a noisy latent; conditioning None = unconditional."""

    @abstractmethod
    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """Image -> latent.  Must be differentiable for local backends."""

    @abstractmethod
    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent -> image.  Must be differentiable for local backends."""

    @abstractmethod
    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        """Unit-norm image embedding.  Differentiable for local backends."""

    @abstractmethod
    def embed_condition(self, condition):
        """Turn raw conditioning (prompt, component id, ...) into a handle."""

    def health(self) -> dict:
        return {"backend": type(self).__name__}

    def predict_noise_cfg(self, z_t: torch.Tensor, conditioning, t: int, omega: float) -> torch.Tensor:
        if conditioning is None or omega == 0.0:
            return self.predict_noise(z_t, conditioning, t)
        eps_cond = self.predict_noise(z_t, conditioning, t)
        eps_uncond = self.predict_noise(z_t, None, t)
        return cfg_combine(eps_cond, eps_uncond, omega)

    def sds_image_gradient(
        self,
        schedule: NoiseSchedule,
        image: torch.Tensor,
        conditioning,
        t: int,
        eps: torch.Tensor,
        omega: float,
        weight: float,
    ) -> torch.Tensor:
        """w(t) * (eps_hat - eps) pulled back through the encoder to image space."""
        x = image.detach().requires_grad_(True)
        z0 = self.encode_image(x)
        if eps.shape != z0.shape:
            raise ValidationError(f"noise shape {tuple(eps.shape)} != latent {tuple(z0.shape)}")
        with torch.no_grad():
            z_t = schedule.add_noise(z0.detach(), t, eps)
            eps_hat = self.predict_noise_cfg(z_t, conditioning, t, omega)
        residual = weight * (eps_hat - eps)
        (grad,) = torch.autograd.grad(z0, x, grad_outputs=residual)
        return grad

    def clip_similarity_grad(
        self, image: torch.Tensor, ref_embedding: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(cosine value, d cosine / d image) for this backend's embedding."""
        x = image.detach().requires_grad_(True)
        cos = _unit_cosine(self.embed_image(x), ref_embedding.detach())
        (grad,) = torch.autograd.grad(cos, x)
        return cos.detach(), grad

    def denoised_image_gradient(
        self,
        schedule: NoiseSchedule,
        image: torch.Tensor,
        ref_embedding: torch.Tensor,
        conditioning,
        t: int,
        eps: torch.Tensor,
        omega: float,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """CLIP-D building block: noise the rendering, denoise one step,
        embed, compare to the reference embedding.

        Returns (loss value, d loss / d image, denoised image).  eps_hat is
        treated as a constant critic, so the only differentiable path runs
        image -> latent -> one-step prediction -> decode -> embedding.
        """
        alpha, sigma = schedule.alpha(t), schedule.sigma(t)
        if alpha < 1e-4:
            raise NumericError(f"alpha_t={alpha:.2e} at t={t} too small for x0 prediction")
        x = image.detach().requires_grad_(True)
        z0 = self.encode_image(x)
        z_t = schedule.add_noise(z0, t, eps)
        with torch.no_grad():
            eps_hat = self.predict_noise_cfg(z_t.detach(), conditioning, t, omega)
        z0_hat = (z_t - sigma * eps_hat) / alpha
        x0_hat = self.decode_latent(z0_hat).clamp(0.0, 1.0)
        loss = -_unit_cosine(self.embed_image(x0_hat), ref_embedding.detach())
        (grad,) = torch.autograd.grad(loss, x)
        return loss.detach(), grad, x0_hat.detach()


class AnalyticOracleBackend(PriorBackend):
    """Exact Gaussian-mixture prior over the latent space.

    The latent space is the image space (identity encoder/decoder).  With
    mixture p(z0) = sum_k w_k N(m_k, c_k^2 I) and forward noising
    z_t = a z0 + s eps, the posterior mean E[z0 | z_t] is closed-form and
    predict_noise returns the exact (z_t - a E[z0|z_t]) / s.  Conditioning
    on a component id restricts the posterior to that component.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        means: np.ndarray,
        variances,
        weights=None,
        embed_pool: int = 4,
    ):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim < 2:
            raise ValidationError("means must be (K, ...latent shape)")
        k = means.shape[0]
        variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), (k,)).copy()
        if np.any(variances <= 0):
            raise ValidationError("component variances must be positive")
        if weights is None:
            weights = np.full(k, 1.0 / k)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,) or np.any(weights <= 0):
            raise ValidationError("weights must be K positive values")
        self.schedule = schedule
        self.means = torch.from_numpy(means)
        self.variances = torch.from_numpy(variances)
        self.log_weights = torch.from_numpy(np.log(weights / weights.sum()))
        self.latent_shape = tuple(means.shape[1:])
        self.embed_pool = int(embed_pool)

    @classmethod
    def from_json_file(cls, path, schedule: NoiseSchedule) -> "AnalyticOracleBackend":
        with open(path) as fh:
            d = json.load(fh)
        shape = tuple(d["shape"])
        means = np.array(d["means"], dtype=np.float64).reshape((-1, *shape))
        return cls(schedule, means, d["variances"], d.get("weights"))

    def health(self) -> dict:
        return {
            "backend": "oracle",
            "components": int(self.means.shape[0]),
            "latent_shape": list(self.latent_shape),
            "t_max": self.schedule.t_max,
            "roundtrip_error": 0.0,
        }

    def embed_condition(self, condition):
        if condition is None:
            return None
        if isinstance(condition, str):
            if condition.startswith("component:"):
                condition = condition.split(":", 1)[1]
            try:
                condition = int(condition)
            except ValueError:
                raise ValidationError(
                    f"oracle conditioning must be a mixture component id, got {condition!r}"
                )
        idx = int(condition)
        if not 0 <= idx < self.means.shape[0]:
            raise ValidationError(f"component id {idx} outside [0, {self.means.shape[0]})")
        return idx

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return latent

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValidationError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        chw = image.permute(2, 0, 1).unsqueeze(0)
        pooled = F.adaptive_avg_pool2d(chw, self.embed_pool).reshape(-1)
        norm = torch.linalg.vector_norm(pooled)
        if norm.item() == 0.0:
            raise ValidationError("cannot embed an all-zero image")
        return pooled / norm

    def posterior_mean(self, z_t: torch.Tensor, t: int, conditioning=None) -> torch.Tensor:
        """Closed-form E[z0 | z_t] under the (possibly restricted) mixture."""
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        if s == 0.0:
            raise ValidationError("posterior undefined at t=0 (no noise)")
        z = z_t.to(self.means.dtype)
        means = self.means
        variances = self.variances
        log_w = self.log_weights
        if conditioning is not None:
            idx = int(conditioning)
            means = means[idx : idx + 1]
            variances = variances[idx : idx + 1]
            log_w = log_w[idx : idx + 1]
        flat = z.reshape(-1)
        m_flat = means.reshape(means.shape[0], -1)
        dim = m_flat.shape[1]
        marg_var = a * a * variances + s * s  # (K,)
        diff = flat.unsqueeze(0) - a * m_flat  # (K, D)
        sq = (diff * diff).sum(dim=1)
        log_resp = log_w - 0.5 * dim * torch.log(2.0 * torch.pi * marg_var) - sq / (2.0 * marg_var)
        resp = torch.softmax(log_resp, dim=0)
        shrink = (a * variances / marg_var).unsqueeze(1)  # (K, 1)
        cond_means = m_flat + shrink * diff
        post = (resp.unsqueeze(1) * cond_means).sum(dim=0)
        return post.reshape(z_t.shape).to(z_t.dtype)

    def predict_noise(self, z_t: torch.Tensor, conditioning, t: int) -> torch.Tensor:
        with torch.no_grad():
            a = self.schedule.alpha(t)
            s = self.schedule.sigma(t)
            post = self.posterior_mean(z_t, t, conditioning)
            return (z_t - a * post) / s


def sds_pixel_gradient(
    backend: PriorBackend,
    schedule: NoiseSchedule,
    image: torch.Tensor,
    conditioning,
    t: int,
    eps: torch.Tensor,
    config: GuidanceConfig,
) -> torch.Tensor:
    """Score-distillation gradient w.r.t. the rendered image.

    The backend is a frozen critic: the returned tensor is detached and
    intended to be applied with the surrogate inner product
    ``(grad * image).sum()`` so it composes with the renderer's autograd.
    """
    if not config.t_min <= t <= config.t_max:
        raise ValidationError(f"t={t} outside sampling range [{config.t_min}, {config.t_max}]")
    weight = schedule.weight(t, config.w_mode)
    try:
        grad = backend.sds_image_gradient(
            schedule, image, conditioning, t, eps, config.omega, weight
        )
    except (ValidationError, NumericError):
        raise
    except Exception as exc:  # attach diagnostics before propagating
        raise PriorBackendError(f"predict_noise failed: {exc}", timestep=t) from exc
    return grad.detach()


def predict_x0(
    backend: PriorBackend,
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    conditioning,
    t: int,
    omega: float,
) -> torch.Tensor:
    """One-step denoised image: decode((z_t - sigma * eps_hat) / alpha), clamped."""
    alpha = schedule.alpha(t)
    sigma = schedule.sigma(t)
    if alpha < 1e-4:
        raise NumericError(f"alpha_t={alpha:.2e} at t={t}: x0 prediction unstable")
    with torch.no_grad():
        eps_hat = backend.predict_noise_cfg(z_t, conditioning, t, omega)
        z0_hat = (z_t - sigma * eps_hat) / alpha
        return backend.decode_latent(z0_hat).clamp(0.0, 1.0)


class _ClipDFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, image, value, grad):
        ctx.save_for_backward(grad)
        return value.clone()

    @staticmethod
    def backward(ctx, upstream):
        (grad,) = ctx.saved_tensors
        return upstream * grad, None, None


def clip_d_loss(
    backend: PriorBackend, reference: torch.Tensor, denoised: torch.Tensor
) -> torch.Tensor:
    """Negative cosine between embeddings of the reference and a denoised image.

    Value is in [-1, 1] and exactly -1 for identical inputs.  The result is
    differentiable w.r.t. ``denoised``; the backward pass is delegated to the
    backend so remote embeddings keep their Jacobians server-side.
    """
    if reference.shape != denoised.shape:
        raise ValidationError(
            f"resolution mismatch: {tuple(reference.shape)} vs {tuple(denoised.shape)}"
        )
    with torch.no_grad():
        ref_emb = backend.embed_image(reference)
    cos, grad = backend.clip_similarity_grad(denoised.detach(), ref_emb)
    return _ClipDFunction.apply(denoised, -cos, -grad)


def clip_d_render_loss(
    backend: PriorBackend,
    schedule: NoiseSchedule,
    image: torch.Tensor,
    reference: torch.Tensor,
    conditioning,
    t: int,
    eps: torch.Tensor,
    config: GuidanceConfig,
) -> torch.Tensor:
    """Full CLIP-D loss on a rendering: noise, one-step denoise, embed, compare.

    Differentiable w.r.t. ``image`` (the denoiser itself stays a constant
    critic).  Shapes of ``image`` and ``reference`` must match.
    """
    if reference.shape != image.shape:
        raise ValidationError("reference and rendering resolutions differ")
    with torch.no_grad():
        ref_emb = backend.embed_image(reference)
    try:
        value, grad, _ = backend.denoised_image_gradient(
            schedule, image, ref_emb, conditioning, t, eps, config.omega
        )
    except (ValidationError, NumericError):
        raise
    except Exception as exc:
        raise PriorBackendError(f"CLIP-D evaluation failed: {exc}", timestep=t) from exc
    return _ClipDFunction.apply(image, value, grad)
