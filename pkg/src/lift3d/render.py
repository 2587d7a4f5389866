"""Differentiable volume rendering of a radiance field.

Emission-absorption compositing with stratified uniform sampling plus an
importance pass that resamples the piecewise-constant weight distribution
of the uniform samples.  Depth is the alpha-weighted expected termination
distance along the (unit-norm) pixel ray, the single depth definition the
depth loss and point lifting consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import camera as cam
from .errors import NumericError, ValidationError
from .field import OccupancyGrid, RadianceField

SHADING_MODES = ("albedo", "lambertian", "normal")

WHITE = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class RenderConfig:
    n_uniform: int = 64
    n_importance: int = 32
    near: float = 0.05
    ambient: float = 0.1
    alpha_eps: float = 1e-6

    def __post_init__(self):
        if self.n_uniform < 2:
            raise ValidationError("need at least 2 uniform samples per ray")
        if self.n_importance < 0:
            raise ValidationError("n_importance must be >= 0")


@dataclass
class RenderOutput:
    """Per-pixel render products, shaped (H, W, ...), torch tensors."""

    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    normal: torch.Tensor | None = None  # (H, W, 3) in [-1, 1], zero where empty

    def detached(self) -> "RenderOutput":
        return RenderOutput(
            rgb=self.rgb.detach(),
            depth=self.depth.detach(),
            alpha=self.alpha.detach(),
            normal=None if self.normal is None else self.normal.detach(),
        )

    def rgb_numpy(self) -> np.ndarray:
        return self.rgb.detach().to(torch.float64).numpy()


def ray_box_span(origins: torch.Tensor, dirs: torch.Tensor, lo, hi, near: float):
    """Entry/exit distances of each ray with a box; exit <= entry marks a
    miss."""
    lo = torch.as_tensor(np.asarray(lo, dtype=np.float64), dtype=origins.dtype)
    hi = torch.as_tensor(np.asarray(hi, dtype=np.float64), dtype=origins.dtype)
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp_min(near)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    return t_near, t_far


def composite(
    sigma: torch.Tensor,
    color: torch.Tensor,
    t_vals: torch.Tensor,
    deltas: torch.Tensor,
    background: torch.Tensor,
    alpha_eps: float = 1e-6,
):
    """Emission-absorption compositing along rays.

    sigma (R, S), color (R, S, 3), t_vals (R, S), deltas (R, S),
    background (3,).  Returns (rgb (R, 3), depth (R,), alpha (R,),
    weights (R, S)).
    """
    tau = sigma * deltas
    alpha_i = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(tau, dim=-1) + tau)  # T_i = exp(-sum_{j<i})
    weights = trans * alpha_i
    acc = weights.sum(dim=-1)
    rgb = (weights.unsqueeze(-1) * color).sum(dim=-2) + (1.0 - acc).unsqueeze(-1) * background
    depth = (weights * t_vals).sum(dim=-1) / acc.clamp_min(alpha_eps)
    return rgb, depth, acc, weights


def sample_pdf(
    t_bins: torch.Tensor, weights: torch.Tensor, n_samples: int, u: torch.Tensor
) -> torch.Tensor:
    """Inverse-CDF draw of n_samples from the piecewise-constant weight
    distribution over bins [t_i, t_{i+1}).  u holds quantiles in [0, 1)."""
    w = weights + 1e-5
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)  # (R, S+1)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[-1] - 1)
    lo = idx - 1
    cdf_lo = torch.gather(cdf, -1, lo)
    cdf_hi = torch.gather(cdf, -1, idx)
    span = (cdf_hi - cdf_lo).clamp_min(1e-12)
    frac = (u - cdf_lo) / span
    t_lo = torch.gather(t_bins, -1, lo.clamp(max=t_bins.shape[-1] - 1))
    t_hi = torch.gather(t_bins, -1, idx.clamp(max=t_bins.shape[-1] - 1))
    return t_lo + frac * (t_hi - t_lo)


def _query_culled(field, pts_flat, grid):
    """Field query with empty-space skipping; culled samples get sigma 0."""
    n = pts_flat.shape[0]
    sigma = torch.zeros(n, dtype=pts_flat.dtype)
    color = torch.full((n, 3), 0.5, dtype=pts_flat.dtype)
    if grid is not None:
        live = grid.lookup(pts_flat)
        if not bool(live.any()):
            return sigma, color, live
        idx = live.nonzero(as_tuple=True)[0]
        s, c = field.query_chunked(pts_flat[idx])
        sigma = torch.zeros(n, dtype=s.dtype).index_put((idx,), s)
        color = color.to(s.dtype).index_put((idx,), c)
        return sigma, color, live
    s, c = field.query_chunked(pts_flat)
    return s, c, torch.ones(n, dtype=torch.bool)


def _field_normals(field, pts: torch.Tensor, create_graph: bool) -> torch.Tensor:
    pts = pts.detach().requires_grad_(True)
    sigma, _ = field.query(pts)
    (grad,) = torch.autograd.grad(sigma.sum(), pts, create_graph=create_graph)
    n = -grad
    return n / torch.linalg.vector_norm(n, dim=-1, keepdim=True).clamp_min(1e-9)


def render(
    field: RadianceField,
    pose: cam.CameraPose,
    background,
    shading: str = "albedo",
    config: RenderConfig = RenderConfig(),
    grid: OccupancyGrid | None = None,
    rng: np.random.Generator | None = None,
    light_dir=None,
    need_normals: bool = False,
    normals_graph: bool = False,
) -> RenderOutput:
    """Render the field from a camera pose over a constant background color.

    With ``rng`` given, uniform samples are stratified and the importance
    pass draws random quantiles; without it both are deterministic
    (midpoint rule), which is what inference and the export path use.
    """
    if shading not in SHADING_MODES:
        raise ValidationError(f"shading must be one of {SHADING_MODES}, got {shading!r}")
    dtype = next(field.parameters()).dtype
    intr = pose.intrinsics
    h, w = intr.height, intr.width
    origins_np, dirs_np = cam.generate_rays(pose)
    origins = torch.from_numpy(origins_np.reshape(-1, 3)).to(dtype)
    dirs = torch.from_numpy(dirs_np.reshape(-1, 3)).to(dtype)
    background = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    n_rays = origins.shape[0]

    if grid is not None:  # samples are only needed where cells are occupied
        lo, hi = grid.occupied_aabb()
    else:
        lo, hi = -field.bound, field.bound
    t_near, t_far = ray_box_span(origins, dirs, lo, hi, config.near)
    hit = t_far > t_near
    span = (t_far - t_near).clamp_min(0.0)

    nu = config.n_uniform
    if rng is not None:
        offsets = torch.from_numpy(rng.random((n_rays, nu))).to(dtype)
    else:
        offsets = torch.full((n_rays, nu), 0.5, dtype=dtype)
    steps = (torch.arange(nu, dtype=dtype) + offsets) / nu
    t_u = t_near.unsqueeze(-1) + span.unsqueeze(-1) * steps

    pts = origins.unsqueeze(1) + t_u.unsqueeze(-1) * dirs.unsqueeze(1)
    sigma_u, rgb_u, _ = _query_culled(field, pts.reshape(-1, 3), grid)
    sigma_u = sigma_u.reshape(n_rays, nu) * hit.unsqueeze(-1)
    rgb_u = rgb_u.reshape(n_rays, nu, 3)

    t_all, sigma_all, rgb_all = t_u, sigma_u, rgb_u
    if config.n_importance > 0:
        with torch.no_grad():
            delta_u = span.unsqueeze(-1) / nu
            _, _, _, w_u = composite(
                sigma_u.detach(), rgb_u.detach(), t_u, delta_u, background, config.alpha_eps
            )
            ni = config.n_importance
            if rng is not None:
                u = torch.from_numpy(rng.random((n_rays, ni))).to(dtype)
            else:
                u = (torch.arange(ni, dtype=dtype) + 0.5).expand(n_rays, ni) / ni
            u = torch.sort(u, dim=-1).values
            t_i = sample_pdf(t_u, w_u, ni, u)
        pts_i = origins.unsqueeze(1) + t_i.unsqueeze(-1) * dirs.unsqueeze(1)
        sigma_i, rgb_i, _ = _query_culled(field, pts_i.reshape(-1, 3), grid)
        sigma_i = sigma_i.reshape(n_rays, ni) * hit.unsqueeze(-1)
        rgb_i = rgb_i.reshape(n_rays, ni, 3)
        t_all = torch.cat([t_u, t_i], dim=-1)
        order = torch.argsort(t_all, dim=-1)
        t_all = torch.gather(t_all, -1, order)
        sigma_all = torch.gather(torch.cat([sigma_u, sigma_i], dim=-1), -1, order)
        rgb_all = torch.gather(
            torch.cat([rgb_u, rgb_i], dim=-2), -2, order.unsqueeze(-1).expand(-1, -1, 3)
        )

    deltas = torch.diff(t_all, dim=-1)
    last = (t_far.unsqueeze(-1) - t_all[..., -1:]).clamp_min(0.0)
    deltas = torch.cat([deltas, last], dim=-1)

    normals = None
    if need_normals or shading in ("lambertian", "normal"):
        pts_all = origins.unsqueeze(1) + t_all.unsqueeze(-1) * dirs.unsqueeze(1)
        flat = pts_all.reshape(-1, 3)
        normals = torch.zeros_like(flat)
        live = grid.lookup(flat) if grid is not None else torch.ones(
            flat.shape[0], dtype=torch.bool
        )
        if bool(live.any()):
            n_live = _field_normals(field, flat[live], create_graph=normals_graph)
            normals = normals.index_put((live.nonzero(as_tuple=True)[0],), n_live)
        normals = normals.reshape(n_rays, t_all.shape[-1], 3)

    if shading == "albedo":
        color = rgb_all
    elif shading == "lambertian":
        if light_dir is None:
            light_dir = pose.position / np.linalg.norm(pose.position)
        l = torch.as_tensor(np.asarray(light_dir, dtype=np.float64), dtype=dtype)
        lambert = (normals * l).sum(dim=-1).clamp_min(0.0)
        color = rgb_all * (config.ambient + (1.0 - config.ambient) * lambert).unsqueeze(-1)
    else:  # normal shading
        color = (normals + 1.0) / 2.0

    rgb_px, depth_px, alpha_px, weights = composite(
        sigma_all, color, t_all, deltas, background, config.alpha_eps
    )

    normal_px = None
    if normals is not None:
        n_acc = (weights.unsqueeze(-1) * normals).sum(dim=-2)
        norm = torch.linalg.vector_norm(n_acc, dim=-1, keepdim=True)
        normal_px = torch.where(norm > 1e-6, n_acc / norm.clamp_min(1e-9), torch.zeros_like(n_acc))
        normal_px = normal_px.reshape(h, w, 3)

    if not bool(torch.isfinite(rgb_px).all() & torch.isfinite(depth_px).all()):
        raise NumericError(
            f"non-finite render output at pose {pose.position.tolist()} "
            f"(field parameters may have diverged)"
        )

    return RenderOutput(
        rgb=rgb_px.reshape(h, w, 3),
        depth=depth_px.reshape(h, w),
        alpha=alpha_px.reshape(h, w),
        normal=normal_px,
    )


def render_gradient(
    field: RadianceField,
    pose: cam.CameraPose,
    upstream_rgb: torch.Tensor,
    background=WHITE,
    **render_kwargs,
) -> dict[str, torch.Tensor]:
    """Gradient of (upstream . rendered rgb) w.r.t. every field parameter."""
    out = render(field, pose, background, **render_kwargs)
    if upstream_rgb.shape != out.rgb.shape:
        raise ValidationError(
            f"upstream gradient shape {tuple(upstream_rgb.shape)} does not match "
            f"render {tuple(out.rgb.shape)}"
        )
    params = dict(field.named_parameters())
    if not out.rgb.requires_grad:  # every sample culled: no dependence at all
        return {name: torch.zeros_like(p) for name, p in params.items()}
    grads = torch.autograd.grad(
        out.rgb,
        list(params.values()),
        grad_outputs=upstream_rgb.to(out.rgb.dtype),
        allow_unused=True,
    )
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }
