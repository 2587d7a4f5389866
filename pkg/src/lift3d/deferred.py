"""Stage-2 appearance: multi-scale point rasterization, a gated-conv U-Net
renderer, and texture-enhancement training of the non-frozen descriptors.

Geometry is frozen: point positions never receive gradients, and the
descriptors of reference-provenance points live in a buffer the optimizer
cannot touch, so both stay bit-identical through training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import camera as cam
from . import losses as L
from . import reporting
from .bundle import ReferenceBundle
from .checkpoint import KIND_REFINE, save_checkpoint
from .config import RunConfig
from .errors import NumericError, PriorBackendError, ValidationError
from .pointcloud import DESCRIPTOR_DIM, TexturedPointCloud
from .prior import PriorBackend, clip_d_render_loss, sds_pixel_gradient, select_prior_loss
from .schedule import NoiseSchedule

log = logging.getLogger("lift3d")

N_SCALES = 3  # rasterization pyramid depth


@dataclass
class RasterScale:
    features: torch.Tensor  # (H_i, W_i, 19)
    occupancy: torch.Tensor  # (H_i, W_i) bool


def _winners(cloud_positions: np.ndarray, pose: cam.CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Hard z-buffer: per covered pixel, the nearest point (ties to the
    lowest point index, which makes rasterization order-independent).

    Returns (flat pixel ids, winning point indices).
    """
    w, h = pose.intrinsics.width, pose.intrinsics.height
    px, depth, ok = cam.project_points(cloud_positions, pose)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    cols = px[idx, 0].astype(np.int64)
    rows = px[idx, 1].astype(np.int64)
    pix = rows * w + cols
    order = np.lexsort((idx, depth[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    return pix_sorted[first], idx[order][first]


def rasterize(
    cloud_positions: np.ndarray,
    descriptors: torch.Tensor,
    pose: cam.CameraPose,
    scale: int,
    background: torch.Tensor,
) -> RasterScale:
    """Feature map I_i at scale i: nearest point's descriptor per pixel,
    the learnable background descriptor where no point lands.

    Gradients flow to winning descriptors and the background only;
    positions are consumed as plain numpy and never differentiated.
    """
    if not 0 <= scale < N_SCALES:
        raise ValidationError(f"scale must be in [0, {N_SCALES})")
    intr = pose.intrinsics
    if intr.width % (1 << scale) or intr.height % (1 << scale):
        raise ValidationError(
            f"resolution {intr.width}x{intr.height} not divisible at scale {scale}"
        )
    w, h = intr.width >> scale, intr.height >> scale
    scaled = pose.with_resolution(w, h)
    pix, winners = _winners(cloud_positions, scaled)
    canvas = background.to(descriptors.dtype).repeat(h * w, 1)
    occ = torch.zeros(h * w, dtype=torch.bool)
    if pix.size:
        pix_t = torch.from_numpy(pix)
        feats = descriptors.index_select(0, torch.from_numpy(winners))
        canvas = canvas.index_put((pix_t,), feats)
        occ[pix_t] = True
    return RasterScale(features=canvas.reshape(h, w, -1), occupancy=occ.reshape(h, w))


class GatedConv(nn.Module):
    """Convolution gated by a learned per-pixel mask: elu(f) * sigmoid(g)."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 2 * c_out, kernel_size=3, stride=stride, padding=1)

    def forward(self, x):
        feat, gate = self.conv(x).chunk(2, dim=1)
        return F.elu(feat) * torch.sigmoid(gate)


class RendererNet(nn.Module):
    """U-Net over rasterized descriptor maps: 3 down / 3 up stages with
    gated convolutions; lower-scale raster maps join the encoder at their
    matching resolutions.  The final conv starts at zero so the first
    output is a learned-bias gray, forcing early training to organize the
    descriptors themselves.
    """

    def __init__(self, in_channels: int = DESCRIPTOR_DIM + 1, base: int = 24):
        super().__init__()
        c1, c2, c3, c4 = base, 2 * base, 3 * base, 4 * base
        self.enc0 = GatedConv(in_channels, c1)
        self.down1 = GatedConv(c1, c2, stride=2)
        self.enc1 = GatedConv(c2 + in_channels, c2)
        self.down2 = GatedConv(c2, c3, stride=2)
        self.enc2 = GatedConv(c3 + in_channels, c3)
        self.down3 = GatedConv(c3, c4, stride=2)
        self.mid = GatedConv(c4, c4)
        self.up3 = GatedConv(c4, c3)
        self.dec2 = GatedConv(2 * c3, c3)
        self.up2 = GatedConv(c3, c2)
        self.dec1 = GatedConv(2 * c2, c2)
        self.up1 = GatedConv(c2, c1)
        self.dec0 = GatedConv(2 * c1, c1)
        self.head = nn.Conv2d(c1, 3, kernel_size=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, scales: list[torch.Tensor]) -> torch.Tensor:
        """scales: NCHW maps at full, 1/2, 1/4 resolution -> rgb (H, W, 3)."""
        x0, x1, x2 = scales
        h, w = x0.shape[2], x0.shape[3]
        pad_h = (-h) % 8
        pad_w = (-w) % 8
        if pad_h or pad_w:
            x0 = F.pad(x0, (0, pad_w, 0, pad_h), mode="replicate")
            x1 = F.pad(x1, (0, pad_w // 2, 0, pad_h // 2), mode="replicate")
            x2 = F.pad(x2, (0, pad_w // 4, 0, pad_h // 4), mode="replicate")
        e0 = self.enc0(x0)
        e1 = self.enc1(torch.cat([self.down1(e0), x1], dim=1))
        e2 = self.enc2(torch.cat([self.down2(e1), x2], dim=1))
        m = self.mid(self.down3(e2))
        d2 = self.dec2(torch.cat([self.up3(_up(m)), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up2(_up(d2)), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up1(_up(d1)), e0], dim=1))
        rgb = torch.sigmoid(self.head(d0))
        return rgb[0, :, :h, :w].permute(1, 2, 0)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class RefineModel(nn.Module):
    """Trainable stage-2 state: free descriptors, background descriptor,
    renderer net.  Frozen descriptors and all positions are buffers."""

    def __init__(self, cloud: TexturedPointCloud, base_channels: int = 24):
        super().__init__()
        self.positions = cloud.positions.copy()
        self.provenance = cloud.provenance.copy()
        frozen = torch.from_numpy(cloud.frozen.copy())
        desc = torch.from_numpy(cloud.descriptors.astype(np.float32))
        self.register_buffer("frozen_mask", frozen)
        self.register_buffer("frozen_desc", desc[frozen])
        self.register_buffer("frozen_idx", frozen.nonzero(as_tuple=True)[0])
        self.register_buffer("free_idx", (~frozen).nonzero(as_tuple=True)[0])
        self.free_desc = nn.Parameter(desc[~frozen].clone())
        self.register_buffer("free_rgb_init", desc[~frozen][:, :3].clone())
        self.background = nn.Parameter(torch.zeros(DESCRIPTOR_DIM))
        self.net = RendererNet(base=base_channels)

    def descriptors(self) -> torch.Tensor:
        full = torch.zeros(
            self.positions.shape[0], DESCRIPTOR_DIM, dtype=self.free_desc.dtype
        )
        full = full.index_put((self.frozen_idx,), self.frozen_desc)
        return full.index_put((self.free_idx,), self.free_desc)

    def cloud(self) -> TexturedPointCloud:
        return TexturedPointCloud(
            positions=self.positions.copy(),
            descriptors=self.descriptors().detach().numpy().copy(),
            provenance=self.provenance.copy(),
            frozen=self.frozen_mask.numpy().copy(),
        )


def raster_stack(model: RefineModel, pose: cam.CameraPose) -> tuple[list, torch.Tensor]:
    """NCHW feature+occupancy maps for the three scales, plus the scale-0
    occupancy (H, W) used by the background regularizer."""
    desc = model.descriptors()
    maps = []
    occ0 = None
    for i in range(N_SCALES):
        rs = rasterize(model.positions, desc, pose, i, model.background)
        occ = rs.occupancy
        if i == 0:
            occ0 = occ
        feat = torch.cat([rs.features, occ.to(rs.features.dtype).unsqueeze(-1)], dim=-1)
        maps.append(feat.permute(2, 0, 1).unsqueeze(0))
    return maps, occ0


def render_deferred(model: RefineModel, pose: cam.CameraPose) -> torch.Tensor:
    """Deterministic deferred rendering: rasterize K scales, decode to rgb."""
    maps, _ = raster_stack(model, pose)
    return model.net(maps)


@dataclass
class RefineResult:
    model: RefineModel
    metrics: list


def train_refine(
    cloud: TexturedPointCloud,
    bundle: ReferenceBundle,
    backend: PriorBackend,
    config: RunConfig,
    run_dir=None,
    model: RefineModel | None = None,
) -> RefineResult:
    """Joint optimization of non-frozen descriptors, the renderer net, and
    the background descriptor.  Novel views use the same SDS / CLIP-D
    timestep routing as stage 1."""
    from .coarse import build_sampler, guidance_from_config, loss_weights, schedule_from_config

    rc = config.refine
    res = rc.resolution
    schedule = schedule_from_config(config)
    guidance = guidance_from_config(config)
    weights = loss_weights(config)
    sampler = build_sampler(config, res)
    ref_pose = sampler.reference_pose

    health = backend.health()
    if "t_max" in health and int(health["t_max"]) != schedule.t_max:
        raise PriorBackendError(
            f"backend schedule has t_max={health['t_max']}, engine uses {schedule.t_max}"
        )

    if model is None:
        model = RefineModel(cloud, base_channels=rc.base_channels)
    work = bundle.resized(res, res)
    ref_img = torch.from_numpy(work.image).float()
    ref_mask = torch.from_numpy(work.mask).float()
    white = torch.ones(3)
    target_ref = ref_img * ref_mask.unsqueeze(-1) + (1.0 - ref_mask.unsqueeze(-1)) * white
    conditioning = backend.embed_condition(bundle.conditioning)
    with torch.no_grad():
        latent_shape = tuple(backend.encode_image(torch.zeros(res, res, 3)).shape)

    rng = np.random.default_rng(config.seed + 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=rc.lr)
    metrics: list[dict] = []
    consecutive_skips = 0
    snapshots_dir = Path(run_dir) / "snapshots" if run_dir else None

    for it in range(rc.iterations):
        pose = sampler.sample(rng, 1.0)  # stage 2 samples the full orbit
        is_ref = pose is sampler.reference_pose
        record: dict = {"iter": it, "view": "ref" if is_ref else "novel"}
        try:
            maps, occ0 = raster_stack(model, pose)
            image = model.net(maps)
            total = image.sum() * 0.0
            if is_ref:
                l_ref = L.reference_loss(image, ref_img, ref_mask, white)
                record["l_ref"] = float(l_ref.detach())
                total = total + weights.l_ref * l_ref
                record["branch"] = "photometric"
            else:
                t = int(rng.integers(guidance.t_min, guidance.t_max + 1))
                branch = select_prior_loss(guidance, t)
                record["t"] = t
                record["branch"] = branch
                eps = torch.from_numpy(rng.standard_normal(latent_shape)).float()
                try:
                    if branch == "sds":
                        g = sds_pixel_gradient(backend, schedule, image, conditioning,
                                               t, eps, guidance)
                        l_sds = (g * image).sum() / g.numel()
                        record["l_sds"] = float(l_sds.detach())
                        total = total + weights.l_sds * l_sds
                    else:
                        l_clipd = clip_d_render_loss(backend, schedule, image, ref_img,
                                                     conditioning, t, eps, guidance)
                        record["l_clipd"] = float(l_clipd.detach())
                        total = total + weights.l_clipd * l_clipd
                except PriorBackendError as exc:
                    exc.view = pose.position.tolist()
                    raise
            empty = ~occ0
            if bool(empty.any()) and rc.lambda_bg > 0:
                bg_term = ((image - 1.0) ** 2)[empty].mean()
                record["reg_background"] = float(bg_term.detach())
                total = total + rc.lambda_bg * bg_term
            if rc.lambda_init > 0 and model.free_desc.shape[0]:
                drift = ((model.free_desc[:, :3] - model.free_rgb_init) ** 2).mean()
                record["reg_texture_init"] = float(drift.detach())
                total = total + rc.lambda_init * drift
        except NumericError as exc:
            record["skipped"] = str(exc)
            total = torch.tensor(float("nan"))

        if not bool(torch.isfinite(total)):
            consecutive_skips += 1
            for group in optimizer.param_groups:
                group["lr"] *= 0.5
            log.warning("refine iteration %d: non-finite loss, skipping", it)
            record["skipped"] = record.get("skipped", "non-finite loss")
            metrics.append(record)
            if consecutive_skips >= rc.max_consecutive_skips:
                raise NumericError(
                    f"aborting refine: {consecutive_skips} consecutive non-finite iterations"
                )
            continue
        consecutive_skips = 0

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        with torch.no_grad():  # rgb dims are colors; keep them in range
            model.free_desc[:, :3].clamp_(0.0, 1.0)
        record["loss_total"] = float(total.detach())
        metrics.append(record)

        if snapshots_dir and (it + 1) % rc.snapshot_every == 0:
            with torch.no_grad():
                img = render_deferred(model, ref_pose)
            reporting.save_png(snapshots_dir / f"iter{it + 1:05d}_ref.png",
                               img.detach().numpy())

    if run_dir is not None:
        finalize_refine_run(model, config, metrics, run_dir)
    return RefineResult(model=model, metrics=metrics)


def finalize_refine_run(model: RefineModel, config: RunConfig, metrics, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.write_effective(run_dir)
    reporting.write_metrics(run_dir / "metrics.ndjson", metrics)
    reporting.save_loss_curves(run_dir / "loss_curves.png", metrics)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors["positions"] = torch.from_numpy(model.positions)
    tensors["provenance"] = torch.from_numpy(model.provenance)
    save_checkpoint(run_dir / "refine.l3d", KIND_REFINE, config.to_dict(), tensors)


def load_refine_checkpoint(path):
    """Rebuild (model, config) from a stage-2 checkpoint."""
    from .checkpoint import load_checkpoint

    kind, config_dict, tensors = load_checkpoint(path, expect_kind=KIND_REFINE)
    config = RunConfig.from_dict(config_dict)
    positions = tensors["positions"].numpy()
    provenance = tensors["provenance"].numpy()
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    frozen = state["frozen_mask"].numpy().astype(bool)
    n = positions.shape[0]
    desc = np.zeros((n, DESCRIPTOR_DIM), dtype=np.float32)
    desc[frozen] = state["frozen_desc"].numpy()
    desc[~frozen] = state["free_desc"].numpy()
    cloud = TexturedPointCloud(
        positions=positions, descriptors=desc, provenance=provenance, frozen=frozen
    )
    model = RefineModel(cloud, base_channels=config.refine.base_channels)
    model.load_state_dict(state)
    return model, config
