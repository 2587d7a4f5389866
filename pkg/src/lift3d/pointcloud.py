"""Stage-2 geometry export: occlusion-aware lifting into one clean cloud.

The reference view is lifted first and those points carry the reference
image's colors, frozen.  Each further view only lifts pixels that no
existing point already accounts for, judged by projecting the accumulated
cloud into the view and depth-testing against the view's rendered surface.
That iterative masking is what keeps one 3D location from receiving
conflicting colors from different views.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import camera as cam
from .bundle import ReferenceBundle
from .errors import ValidationError
from .field import OccupancyGrid, RadianceField
from .render import RenderConfig, RenderOutput, WHITE, render

DESCRIPTOR_DIM = 19
SCENE_DIAMETER = 2.0 * np.sqrt(3.0)  # of the [-1, 1]^3 scene cube

PLY_SIDE_MAGIC = b"L3DX"


@dataclass
class TexturedPointCloud:
    """Positions + 19-dim descriptors (dims 0-2 rgb) + lift provenance.

    provenance is the source-view index (0 = reference); frozen marks
    reference-visible points whose descriptors must never change.
    """

    positions: np.ndarray  # (N, 3) float64
    descriptors: np.ndarray  # (N, 19) float32
    provenance: np.ndarray  # (N,) int32
    frozen: np.ndarray  # (N,) bool

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValidationError("positions must be (N, 3)")
        if self.descriptors.shape != (n, DESCRIPTOR_DIM):
            raise ValidationError(f"descriptors must be (N, {DESCRIPTOR_DIM})")
        if self.provenance.shape != (n,) or self.frozen.shape != (n,):
            raise ValidationError("provenance/frozen must be (N,)")
        rgb = self.descriptors[:, :3]
        if n and (rgb.min() < -1e-6 or rgb.max() > 1.0 + 1e-6):
            raise ValidationError("descriptor rgb dims must lie in [0, 1]")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def rgb(self) -> np.ndarray:
        return self.descriptors[:, :3]


def lift_depth_map(
    out: RenderOutput,
    pose: cam.CameraPose,
    color_source: np.ndarray,
    alpha_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """One world point per pixel with alpha above threshold.

    Points sit at origin + depth * direction; colors come from
    ``color_source`` (the reference image for the reference view, the
    rendered rgb for novel views).  Returns (positions (M, 3), colors (M, 3)).
    """
    if not 0.0 < alpha_threshold < 1.0:
        raise ValidationError("alpha threshold must be in (0, 1)")
    alpha = out.alpha.detach().double().numpy()
    depth = out.depth.detach().double().numpy()
    if color_source.shape[:2] != alpha.shape:
        raise ValidationError("color source resolution does not match the render")
    origins, dirs = cam.generate_rays(pose)
    sel = alpha > alpha_threshold
    pts = origins[sel] + depth[sel, None] * dirs[sel]
    colors = np.asarray(color_source, dtype=np.float64)[sel]
    return pts, np.clip(colors, 0.0, 1.0)


def visibility_mask(
    cloud: TexturedPointCloud,
    pose: cam.CameraPose,
    surface_depth: np.ndarray | None = None,
    surface_valid: np.ndarray | None = None,
    depth_tolerance: float = 0.01 * SCENE_DIAMETER,
    dilate: bool = True,
) -> np.ndarray:
    """Per-pixel flag: does an existing point account for what this view
    sees at that pixel?

    A projected point covers its pixel when it is at (or in front of) the
    view's rendered surface within ``depth_tolerance``; points hidden
    behind the surface do not count, which is what lets a novel view lift
    the near side of geometry whose far side is already in the cloud.
    Without a surface depth every in-frustum point covers.  The mask is
    dilated 3x3 against quantization holes and is monotone in the point
    set by construction.
    """
    h, w = pose.intrinsics.height, pose.intrinsics.width
    mask = np.zeros((h, w), dtype=bool)
    if len(cloud) == 0:
        return mask
    px, depth, ok = cam.project_points(cloud.positions, pose)
    if surface_depth is not None:
        limit = np.where(
            surface_valid if surface_valid is not None else np.isfinite(surface_depth),
            surface_depth,
            np.inf,
        )
        cols = np.clip(px[:, 0].astype(np.int64), 0, w - 1)
        rows = np.clip(px[:, 1].astype(np.int64), 0, h - 1)
        ok = ok & (depth <= limit[rows, cols] + depth_tolerance)
    cols = px[ok, 0].astype(np.int64)
    rows = px[ok, 1].astype(np.int64)
    mask[rows, cols] = True
    if dilate:
        padded = np.pad(mask, 1)
        stacked = np.zeros_like(mask)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                stacked |= padded[dy : dy + h, dx : dx + w]
        mask = stacked
    return mask


def ring_poses(config_cam, resolution: int, azimuth_steps: int, elevations_deg) -> list:
    """Novel-view orbit covering azimuth rings at several elevations."""
    intr = cam.CameraIntrinsics(config_cam.reference_fov_deg, resolution, resolution)
    poses = []
    for elev in elevations_deg:
        for k in range(azimuth_steps):
            az = config_cam.reference_azimuth_deg + 360.0 * k / azimuth_steps
            if elev == config_cam.reference_elevation_deg and k == 0:
                continue  # the reference view itself is lifted separately
            poses.append(cam.orbit_pose(az, elev, config_cam.reference_distance, intr))
    return poses


def _depth_stable(depth: np.ndarray, valid: np.ndarray, limit: float) -> np.ndarray:
    """Pixels whose 3x3 neighborhood depth spread stays under ``limit``.

    Filters grazing-incidence pixels, whose depth (and hence 3D position)
    is ill-conditioned within the pixel footprint; a later view sees the
    same surface face-on and lifts it cleanly instead.
    """
    h, w = depth.shape
    big = np.where(valid, depth, np.inf)
    small = np.where(valid, depth, -np.inf)
    lo = np.full_like(depth, np.inf)
    hi = np.full_like(depth, -np.inf)
    padded_lo = np.pad(big, 1, constant_values=np.inf)
    padded_hi = np.pad(small, 1, constant_values=-np.inf)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            lo = np.minimum(lo, padded_lo[dy : dy + h, dx : dx + w])
            hi = np.maximum(hi, padded_hi[dy : dy + h, dx : dx + w])
    return valid & ((hi - lo) < limit)


def build_cloud(
    field: RadianceField,
    bundle: ReferenceBundle,
    ref_pose: cam.CameraPose,
    novel_poses: list,
    alpha_threshold: float = 0.5,
    depth_tolerance: float = 0.01 * SCENE_DIAMETER,
    render_cfg: RenderConfig = RenderConfig(),
    grid: OccupancyGrid | None = None,
    seed: int = 0,
    grazing_limit: float | None = None,
) -> TexturedPointCloud:
    """Iteratively lift the field into one conflict-free textured cloud.

    The reference view goes first (ground-truth colors, frozen); each novel
    view then lifts only depth-stable pixels its visibility mask marks
    unobserved.  Descriptor dims 3-18 are seeded random.
    """
    if grazing_limit is None:
        grazing_limit = 1.5 * depth_tolerance
    res = (ref_pose.intrinsics.width, ref_pose.intrinsics.height)
    work = bundle.resized(*res)
    with torch.no_grad():
        ref_out = render(field, ref_pose, WHITE, config=render_cfg, grid=grid).detached()
    positions, colors = lift_depth_map(ref_out, ref_pose, work.image, alpha_threshold)
    if positions.shape[0] == 0:
        raise ValidationError("reference view lifted no points (degenerate alpha mask)")
    provenance = [np.zeros(positions.shape[0], dtype=np.int32)]
    all_pos = [positions]
    all_rgb = [colors]

    cloud = _assemble(all_pos, all_rgb, provenance, seed)
    for view_idx, pose in enumerate(novel_poses, start=1):
        with torch.no_grad():
            out = render(field, pose, WHITE, config=render_cfg, grid=grid).detached()
        alpha = out.alpha.double().numpy()
        valid = alpha > alpha_threshold
        covered = visibility_mask(
            cloud,
            pose,
            surface_depth=out.depth.double().numpy(),
            surface_valid=valid,
            depth_tolerance=depth_tolerance,
        )
        stable = _depth_stable(out.depth.double().numpy(), valid, grazing_limit)
        lift_px = stable & ~covered
        if not lift_px.any():
            continue
        origins, dirs = cam.generate_rays(pose)
        depth = out.depth.double().numpy()
        pts = origins[lift_px] + depth[lift_px, None] * dirs[lift_px]
        rgb = np.clip(out.rgb.double().numpy()[lift_px], 0.0, 1.0)
        inside = (np.abs(pts) <= field.bound).all(axis=1)
        all_pos.append(pts[inside])
        all_rgb.append(rgb[inside])
        provenance.append(np.full(int(inside.sum()), view_idx, dtype=np.int32))
        cloud = _assemble(all_pos, all_rgb, provenance, seed)

    # Visibility masking works at each view's own pixel grid; a final merge
    # pass removes the residual near-duplicates that different grids can
    # still alias onto one pixel of some other source view.
    keep = merge_duplicates(
        cloud.positions,
        cloud.provenance,
        [ref_pose, *novel_poses],
        depth_tolerance=depth_tolerance,
    )
    if not keep.all():
        cloud = TexturedPointCloud(
            positions=cloud.positions[keep],
            descriptors=cloud.descriptors[keep],
            provenance=cloud.provenance[keep],
            frozen=cloud.frozen[keep],
        )
    return cloud


def merge_duplicates(
    positions: np.ndarray,
    provenance: np.ndarray,
    poses: list,
    px_radius: float = 0.75,
    depth_tolerance: float = 0.01 * SCENE_DIAMETER,
) -> np.ndarray:
    """Keep-mask removing cross-lift duplicates across all source views.

    A point is dropped when, in any source view, its projection lands
    within ``px_radius`` pixels and the depth tolerance of a kept point
    from a *different* lift (earlier provenance wins, so reference points
    always survive).  Points of one lift never conflict with each other:
    their colors come from a single consistent source image.  The
    radius/tolerance carry a guard band over the audit criterion
    (0.5 px, 1.0 tol) so surviving cross-lift pairs can never alias.
    """
    n = positions.shape[0]
    keep = np.ones(n, dtype=bool)
    order = np.argsort(provenance.astype(np.int64), kind="stable")
    guard_tol = 1.25 * depth_tolerance
    for pose in poses:
        px, depth, ok = cam.project_points(positions, pose)
        kept_at: dict[tuple[int, int], list[int]] = {}
        for i in order:
            if not keep[i] or not ok[i]:
                continue
            c, r = int(px[i, 0]), int(px[i, 1])
            dup = False
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    for j in kept_at.get((r + dr, c + dc), ()):
                        if (
                            provenance[j] != provenance[i]
                            and abs(px[i, 0] - px[j, 0]) <= px_radius
                            and abs(px[i, 1] - px[j, 1]) <= px_radius
                            and abs(depth[i] - depth[j]) < guard_tol
                        ):
                            dup = True
                            break
                    if dup:
                        break
                if dup:
                    break
            if dup:
                keep[i] = False
            else:
                kept_at.setdefault((r, c), []).append(i)
    return keep


def _assemble(all_pos, all_rgb, provenance, seed) -> TexturedPointCloud:
    positions = np.concatenate(all_pos, axis=0)
    rgb = np.concatenate(all_rgb, axis=0)
    prov = np.concatenate(provenance, axis=0)
    n = positions.shape[0]
    extras = np.random.default_rng(seed).normal(0.0, 0.1, size=(n, DESCRIPTOR_DIM - 3))
    desc = np.concatenate([rgb, extras], axis=1).astype(np.float32)
    return TexturedPointCloud(
        positions=positions,
        descriptors=desc,
        provenance=prov,
        frozen=prov == 0,
    )


def save_cloud(dirpath, cloud: TexturedPointCloud):
    """PLY (positions, float rgb, provenance, frozen) plus a sidecar binary
    holding the 16 non-color descriptor dims."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property float red\nproperty float green\nproperty float blue\n"
        "property int provenance\nproperty uchar frozen\n"
        "end_header\n"
    )
    rec = np.zeros(
        n,
        dtype=[("pos", "<f8", 3), ("rgb", "<f4", 3), ("prov", "<i4"), ("frozen", "u1")],
    )
    rec["pos"] = cloud.positions
    rec["rgb"] = cloud.descriptors[:, :3]
    rec["prov"] = cloud.provenance
    rec["frozen"] = cloud.frozen.astype(np.uint8)
    with open(dirpath / "points.ply", "wb") as fh:
        fh.write(header.encode())
        fh.write(rec.tobytes())
    extras = np.ascontiguousarray(cloud.descriptors[:, 3:], dtype="<f4")
    with open(dirpath / "descriptors.bin", "wb") as fh:
        fh.write(PLY_SIDE_MAGIC + struct.pack("<II", n, DESCRIPTOR_DIM - 3))
        fh.write(extras.tobytes())
    with open(dirpath / "cloud.json", "w") as fh:
        json.dump({"points": n, "descriptor_dim": DESCRIPTOR_DIM}, fh)


def load_cloud(dirpath) -> TexturedPointCloud:
    dirpath = Path(dirpath)
    ply = dirpath / "points.ply"
    if not ply.exists():
        raise ValidationError(f"no points.ply under {dirpath}", code="missing-file")
    blob = ply.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValidationError(f"{ply} is not a PLY file")
    header = blob[:end].decode()
    n = int(next(l.split()[-1] for l in header.splitlines() if l.startswith("element vertex")))
    rec = np.frombuffer(
        blob[end + len(b"end_header\n") :],
        dtype=[("pos", "<f8", 3), ("rgb", "<f4", 3), ("prov", "<i4"), ("frozen", "u1")],
        count=n,
    )
    side = (dirpath / "descriptors.bin").read_bytes()
    if side[:4] != PLY_SIDE_MAGIC:
        raise ValidationError("descriptor sidecar has a bad magic")
    sn, sd = struct.unpack("<II", side[4:12])
    if sn != n or sd != DESCRIPTOR_DIM - 3:
        raise ValidationError("descriptor sidecar does not match the PLY")
    extras = np.frombuffer(side[12:], dtype="<f4").reshape(n, sd)
    desc = np.concatenate([rec["rgb"], extras], axis=1).astype(np.float32)
    return TexturedPointCloud(
        positions=rec["pos"].astype(np.float64),
        descriptors=desc,
        provenance=rec["prov"].astype(np.int32),
        frozen=rec["frozen"].astype(bool),
    )
