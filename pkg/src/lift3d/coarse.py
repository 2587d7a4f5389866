"""Stage-1 training: fit the radiance field to one reference image.

Every iteration samples one view.  The reference view gets the photometric
and depth-correlation losses; novel views get exactly one of the SDS or
CLIP-D prior losses, routed by timestep threshold.  Geometric regularizers
apply at all views.  The loop is deterministic for a fixed seed and
backend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import camera as cam
from . import losses as L
from . import reporting
from .bundle import ReferenceBundle
from .checkpoint import KIND_FIELD, save_checkpoint
from .config import RunConfig
from .errors import NumericError, PriorBackendError
from .field import FieldConfig, OccupancyGrid, RadianceField, update_occupancy
from .prior import (
    GuidanceConfig,
    PriorBackend,
    clip_d_render_loss,
    sds_pixel_gradient,
    select_prior_loss,
)
from .render import RenderConfig, WHITE, render
from .schedule import NoiseSchedule

log = logging.getLogger("lift3d")

SHADING_CHOICES = ("albedo", "lambertian", "normal")


@dataclass
class CoarseResult:
    field: RadianceField
    grid: OccupancyGrid
    metrics: list


def reference_pose(config: RunConfig, resolution: int | None = None) -> cam.CameraPose:
    c = config.camera
    res = resolution or config.coarse.resolution
    intr = cam.CameraIntrinsics(c.reference_fov_deg, res, res)
    return cam.orbit_pose(c.reference_azimuth_deg, c.reference_elevation_deg,
                          c.reference_distance, intr)


def build_sampler(config: RunConfig, resolution: int | None = None) -> cam.ViewSampler:
    c = config.camera
    return cam.ViewSampler(
        reference_pose=reference_pose(config, resolution),
        reference_azimuth_deg=c.reference_azimuth_deg,
        reference_elevation_deg=c.reference_elevation_deg,
        azimuth_range_deg=tuple(c.azimuth_range_deg),
        elevation_range_deg=tuple(c.elevation_range_deg),
        distance_range=tuple(c.distance_range),
        fov_range_deg=tuple(c.fov_range_deg),
        reference_prob=c.reference_prob,
        expand_fraction=c.expand_fraction,
    )


def field_from_config(config: RunConfig, seed: int | None = None) -> RadianceField:
    f = config.field_
    return RadianceField(
        FieldConfig(
            levels=f.levels,
            features_per_level=f.features_per_level,
            table_size_log2=f.table_size_log2,
            base_resolution=f.base_resolution,
            finest_resolution=f.finest_resolution,
            hidden_dim=f.hidden_dim,
            density_bias=f.density_bias,
            density_mu=f.density_mu,
            bound=f.bound,
        ),
        seed=config.seed if seed is None else seed,
    )


def schedule_from_config(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return NoiseSchedule(s.t_max, s.beta_start, s.beta_end)


def guidance_from_config(config: RunConfig) -> GuidanceConfig:
    g = config.guidance
    return GuidanceConfig(g.omega, g.t_min, g.t_max, g.t_star, g.w_mode)


def render_config(config: RunConfig) -> RenderConfig:
    r = config.render
    return RenderConfig(r.n_uniform, r.n_importance, r.near, r.ambient)


def loss_weights(config: RunConfig) -> L.LossWeights:
    w = config.losses
    return L.LossWeights(w.l_ref, w.l_depth, w.l_sds, w.l_clipd,
                         w.sparsity, w.opacity, w.smoothness)


def train_coarse(
    field: RadianceField,
    bundle: ReferenceBundle,
    backend: PriorBackend,
    config: RunConfig,
    run_dir=None,
) -> CoarseResult:
    cc = config.coarse
    res = cc.resolution
    schedule = schedule_from_config(config)
    guidance = guidance_from_config(config)
    rcfg = render_config(config)
    weights = loss_weights(config)
    sampler = build_sampler(config, res)
    ref_pose = sampler.reference_pose

    health = backend.health()  # one reachability probe before training
    if "t_max" in health and int(health["t_max"]) != schedule.t_max:
        raise PriorBackendError(
            f"backend schedule has t_max={health['t_max']}, engine uses {schedule.t_max}"
        )

    dtype = next(field.parameters()).dtype
    work = bundle.resized(res, res)
    ref_img = torch.from_numpy(work.image).to(dtype)
    ref_mask = torch.from_numpy(work.mask).to(dtype)
    ref_depth = torch.from_numpy(work.depth).to(dtype)
    conditioning = backend.embed_condition(bundle.conditioning)
    with torch.no_grad():
        latent_shape = tuple(backend.encode_image(torch.zeros(res, res, 3, dtype=dtype)).shape)

    grid = OccupancyGrid(
        resolution=cc.occupancy_resolution,
        threshold=cc.occupancy_threshold,
        bound=field.bound,
    )
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(field.parameters(), lr=cc.lr)
    metrics: list[dict] = []
    consecutive_skips = 0
    need_smooth = weights.smoothness > 0

    snapshots_dir = Path(run_dir) / "snapshots" if run_dir else None

    for it in range(cc.iterations):
        if it % cc.occupancy_period == 0:
            update_occupancy(field, grid)
        progress = it / max(cc.iterations - 1, 1)
        bg_np = L.jitter_background(rng if cc.jitter_background else None)
        bg = torch.from_numpy(bg_np).to(dtype)
        pose = sampler.sample(rng, progress)
        is_ref = pose is sampler.reference_pose

        record: dict = {"iter": it, "view": "ref" if is_ref else "novel"}
        try:
            if is_ref:
                out = render(field, pose, bg_np, shading="albedo", config=rcfg, grid=grid,
                             rng=rng, need_normals=need_smooth, normals_graph=need_smooth)
                total = out.rgb.sum() * 0.0
                l_ref = L.reference_loss(out.rgb, ref_img, ref_mask, bg)
                record["l_ref"] = float(l_ref.detach())
                total = total + weights.l_ref * l_ref
                l_depth = L.depth_loss(out.depth, out.alpha, ref_depth, ref_mask)
                if l_depth is not None:
                    record["l_depth"] = float(l_depth.detach())
                    total = total + weights.l_depth * l_depth
                record["branch"] = "photometric"
            else:
                shading = rng.choice(SHADING_CHOICES, p=cc.shading_probs)
                light = None
                if shading == "lambertian":
                    toward = pose.position / np.linalg.norm(pose.position)
                    light = toward + 0.4 * rng.standard_normal(3)
                    light /= np.linalg.norm(light)
                need_n = need_smooth or shading != "albedo"
                out = render(field, pose, bg_np, shading=str(shading), config=rcfg, grid=grid,
                             rng=rng, light_dir=light, need_normals=need_n,
                             normals_graph=need_n)
                total = out.rgb.sum() * 0.0
                t = int(rng.integers(guidance.t_min, guidance.t_max + 1))
                branch = select_prior_loss(guidance, t)
                record["t"] = t
                record["branch"] = branch
                record["shading"] = str(shading)
                try:
                    if branch == "sds":
                        eps = torch.from_numpy(rng.standard_normal(latent_shape)).to(dtype)
                        g = sds_pixel_gradient(backend, schedule, out.rgb, conditioning,
                                               t, eps, guidance)
                        # surrogate whose gradient w.r.t. the rendering is g;
                        # mean reduction keeps the loss weights comparable to
                        # the (mean-reduced) photometric terms at any resolution
                        l_sds = (g * out.rgb).sum() / g.numel()
                        record["l_sds"] = float(l_sds.detach())
                        total = total + weights.l_sds * l_sds
                    else:
                        eps = torch.from_numpy(rng.standard_normal(latent_shape)).to(dtype)
                        # the reference must wear the same background as the
                        # render or the embeddings compare backgrounds
                        ref_composited = ref_img * ref_mask.unsqueeze(-1) + (
                            1.0 - ref_mask.unsqueeze(-1)
                        ) * bg
                        l_clipd = clip_d_render_loss(backend, schedule, out.rgb, ref_composited,
                                                     conditioning, t, eps, guidance)
                        record["l_clipd"] = float(l_clipd.detach())
                        total = total + weights.l_clipd * l_clipd
                except PriorBackendError as exc:
                    exc.view = pose.position.tolist()
                    raise
            reg_total, reg_parts = L.geometry_regularizers(
                out.alpha, out.normal if need_smooth else None, weights
            )
            record.update(reg_parts)
            total = total + reg_total
        except NumericError as exc:
            record["skipped"] = str(exc)
            total = torch.tensor(float("nan"))

        if not bool(torch.isfinite(total)):
            consecutive_skips += 1
            for group in optimizer.param_groups:
                group["lr"] *= 0.5
            log.warning("iteration %d: non-finite loss, skipping (lr halved)", it)
            record["skipped"] = record.get("skipped", "non-finite loss")
            record["lr"] = optimizer.param_groups[0]["lr"]
            metrics.append(record)
            if consecutive_skips >= cc.max_consecutive_skips:
                raise NumericError(
                    f"aborting: {consecutive_skips} consecutive non-finite iterations"
                )
            continue
        consecutive_skips = 0

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        record["loss_total"] = float(total.detach())
        record["lr"] = optimizer.param_groups[0]["lr"]
        metrics.append(record)

        if snapshots_dir and (it + 1) % cc.snapshot_every == 0:
            _save_snapshots(field, grid, config, snapshots_dir, it + 1, rcfg)

    if run_dir is not None:
        finalize_coarse_run(field, grid, config, metrics, run_dir)
    return CoarseResult(field=field, grid=grid, metrics=metrics)


def _save_snapshots(field, grid, config, snapshots_dir, it, rcfg, n_views: int = 4):
    res = config.coarse.resolution
    for k in range(n_views):
        pose = cam.orbit_pose(
            360.0 * k / n_views,
            config.camera.reference_elevation_deg,
            config.camera.reference_distance,
            cam.CameraIntrinsics(config.camera.reference_fov_deg, res, res),
        )
        with torch.no_grad():
            out = render(field, pose, WHITE, config=rcfg, grid=grid)
        reporting.save_png(snapshots_dir / f"iter{it:05d}_view{k}.png", out.rgb_numpy())


def finalize_coarse_run(field, grid, config, metrics, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.write_effective(run_dir)
    reporting.write_metrics(run_dir / "metrics.ndjson", metrics)
    reporting.save_loss_curves(run_dir / "loss_curves.png", metrics)
    tensors = {f"field.{k}": v for k, v in field.state_dict().items()}
    tensors["occupancy"] = grid.occupied
    save_checkpoint(run_dir / "field.l3d", KIND_FIELD, config.to_dict(), tensors)


def load_field_checkpoint(path, expect_kind=KIND_FIELD):
    """Rebuild (field, grid, config) from a stage-1 checkpoint."""
    from .checkpoint import load_checkpoint

    kind, config_dict, tensors = load_checkpoint(path, expect_kind=expect_kind)
    config = RunConfig.from_dict(config_dict)
    field = field_from_config(config)
    state = {k[len("field."):]: v for k, v in tensors.items() if k.startswith("field.")}
    field.load_state_dict(state)
    occ = tensors["occupancy"]
    grid = OccupancyGrid(
        resolution=occ.shape[0],
        threshold=config.coarse.occupancy_threshold,
        bound=field.bound,
        occupied=occ,
    )
    return field, grid, config


def export_views(
    field: RadianceField,
    poses: list[cam.CameraPose],
    background=WHITE,
    config: RenderConfig = RenderConfig(),
    grid: OccupancyGrid | None = None,
    need_normals: bool = False,
):
    """Deterministic renders (with depth and alpha) for each requested pose."""
    outs = []
    for pose in poses:
        with torch.no_grad():
            outs.append(
                render(field, pose, background, config=config, grid=grid,
                       need_normals=need_normals).detached()
            )
    return outs
