"""Reference-view losses, geometric regularizers, and background jitter.

All loss functions are pure: torch scalars with autograd reaching whatever
produced their inputs.  The depth loss compares depth maps only up to a
positive affine map (Pearson correlation), which is what an off-the-shelf
monocular depth estimate can support.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

log = logging.getLogger("lift3d")

MIN_DEPTH_PIXELS = 16


@dataclass(frozen=True)
class LossWeights:
    l_ref: float = 5.0
    l_depth: float = 1.0
    l_sds: float = 1.0
    l_clipd: float = 10.0
    sparsity: float = 5e-4
    opacity: float = 1e-3
    smoothness: float = 1e-2


def reference_loss(
    rendered_rgb: torch.Tensor,
    reference_image: torch.Tensor,
    mask: torch.Tensor,
    background: torch.Tensor,
) -> torch.Tensor:
    """Mean L1 between the rendering and the masked reference composited
    over the same background color the rendering used."""
    if rendered_rgb.shape != reference_image.shape:
        raise ValidationError(
            f"resolution mismatch: render {tuple(rendered_rgb.shape)} "
            f"vs reference {tuple(reference_image.shape)}"
        )
    if mask.shape != reference_image.shape[:2]:
        raise ValidationError("mask resolution does not match the reference image")
    m = mask.unsqueeze(-1)
    target = reference_image * m + (1.0 - m) * background
    return (rendered_rgb - target).abs().mean()


def depth_loss(
    rendered_depth: torch.Tensor,
    alpha: torch.Tensor,
    prior_depth: torch.Tensor,
    mask: torch.Tensor,
    min_pixels: int = MIN_DEPTH_PIXELS,
) -> torch.Tensor | None:
    """Negative Pearson correlation between rendered and estimated depth.

    Evaluated over foreground pixels (mask > 0.5 and alpha > 0.5).  Returns
    None (and logs a warning) instead of NaN when fewer than ``min_pixels``
    qualify or either depth has zero variance; the trainer skips the term
    for that step.
    """
    if rendered_depth.shape != prior_depth.shape:
        raise ValidationError("depth map resolutions differ")
    valid = (mask > 0.5) & (alpha > 0.5)
    n = int(valid.sum())
    if n < min_pixels:
        log.warning("depth loss skipped: only %d valid foreground pixels", n)
        return None
    d = rendered_depth[valid]
    p = prior_depth[valid].detach()
    d_c = d - d.mean()
    p_c = p - p.mean()
    d_std = torch.sqrt((d_c * d_c).mean())
    p_std = torch.sqrt((p_c * p_c).mean())
    if float(d_std.detach()) < 1e-12 or float(p_std) < 1e-12:
        log.warning("depth loss skipped: zero variance in a depth map")
        return None
    return -(d_c * p_c).mean() / (d_std * p_std)


def sparsity_term(alpha: torch.Tensor) -> torch.Tensor:
    """Mean accumulated opacity: pushes rays toward carrying no mass."""
    return alpha.mean()


def opacity_entropy_term(alpha: torch.Tensor) -> torch.Tensor:
    """Mean binary entropy of alpha: pushes opacity toward {0, 1}.

    Pixels at exactly 0 or 1 contribute zero (entropy of a sure event)
    and stay off the autograd path, so fully empty renders are exact.
    """
    interior = (alpha > 0.0) & (alpha < 1.0)
    if not bool(interior.any()):
        return alpha.sum() * 0.0
    a = alpha[interior]
    ent = torch.special.entr(a) + torch.special.entr(1.0 - a)
    return ent.sum() / alpha.numel()


def smoothness_term(normal_map: torch.Tensor) -> torch.Tensor:
    """Mean squared finite difference of the normal map (flat maps score 0)."""
    dx = normal_map[:, 1:, :] - normal_map[:, :-1, :]
    dy = normal_map[1:, :, :] - normal_map[:-1, :, :]
    return (dx * dx).sum(dim=-1).mean() + (dy * dy).sum(dim=-1).mean()


def geometry_regularizers(
    alpha: torch.Tensor,
    normal_map: torch.Tensor | None,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of sparsity + opacity-entropy + normal smoothness.

    A term with zero weight is not evaluated at all (toggleable).
    """
    total = alpha.sum() * 0.0
    parts: dict[str, float] = {}
    if weights.sparsity > 0:
        t = sparsity_term(alpha)
        parts["reg_sparsity"] = float(t.detach())
        total = total + weights.sparsity * t
    if weights.opacity > 0:
        t = opacity_entropy_term(alpha)
        parts["reg_opacity"] = float(t.detach())
        total = total + weights.opacity * t
    if weights.smoothness > 0 and normal_map is not None:
        t = smoothness_term(normal_map)
        parts["reg_smoothness"] = float(t.detach())
        total = total + weights.smoothness * t
    return total, parts


def jitter_background(rng: np.random.Generator | None) -> np.ndarray:
    """Uniform random rgb for training augmentation; white for inference.

    The caller must reuse the returned color for both the render and the
    reference compositing within one iteration.
    """
    if rng is None:
        return np.ones(3)
    return rng.uniform(0.0, 1.0, size=3)
