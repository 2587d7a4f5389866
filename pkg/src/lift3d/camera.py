"""Pinhole camera model, orbit view sampling, rays, and point projection.

Conventions (fixed for the whole pipeline):

* World frame: right-handed, +y up.  The object sits at the origin inside
  the unit-ish scene box.
* Camera frame: +x right, +y up, looking along -z (so an identity
  camera-to-world rotation at position (0, 0, d) looks at the origin).
* Orbit parametrization: azimuth rotates about +y, elevation lifts toward
  +y; azimuth 0 / elevation 0 places the camera on the +z axis.  The
  reference view is defined as azimuth 0, elevation 0 (the convention is
  ours; callers that need another reference view pass their own pose).
* Pixel (i, j) means column i, row j; its ray passes through the pixel
  center (i + 0.5, j + 0.5).
* "depth" always means Euclidean distance along the unit-norm pixel ray,
  which is what the volume renderer produces and depth-map lifting
  consumes.  Projection returns the same quantity so that
  lift -> project is an exact round trip.

Everything here is a plain value type on numpy arrays; the only mutable
piece of state, the sampler's RNG, is passed in explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

# Elevation clamp keeping the look-at up-vector well conditioned.
MAX_ELEVATION_DEG = 75.0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole intrinsics: square pixels, center principal point."""

    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValidationError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be positive")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def principal(self) -> tuple[float, float]:
        return (self.width / 2.0, self.height / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation + position + intrinsics."""

    rotation: np.ndarray  # (3, 3) orthonormal, camera-to-world
    position: np.ndarray  # (3,)
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        p = np.asarray(self.position, dtype=np.float64)
        if r.shape != (3, 3) or p.shape != (3,):
            raise ValidationError("pose needs a 3x3 rotation and 3-vector position")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValidationError("rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "position", p)

    def to_json(self) -> str:
        return json.dumps(
            {
                "rotation": [float(v) for v in self.rotation.reshape(-1)],
                "position": [float(v) for v in self.position],
                "fov_deg": self.intrinsics.fov_deg,
                "width": self.intrinsics.width,
                "height": self.intrinsics.height,
            }
        )

    @staticmethod
    def from_json(text: str) -> "CameraPose":
        d = json.loads(text)
        return CameraPose(
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.array(d["position"], dtype=np.float64),
            intrinsics=CameraIntrinsics(d["fov_deg"], int(d["width"]), int(d["height"])),
        )

    def with_resolution(self, width: int, height: int) -> "CameraPose":
        return replace(self, intrinsics=CameraIntrinsics(self.intrinsics.fov_deg, width, height))


def look_at_origin(position: np.ndarray, intrinsics: CameraIntrinsics) -> CameraPose:
    """Pose at ``position`` facing the world origin, world +y as up hint."""
    p = np.asarray(position, dtype=np.float64)
    fwd = -p / np.linalg.norm(p)
    up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ up) > 0.999:  # looking straight up/down; pick another up hint
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd], axis=1)
    return CameraPose(rotation=rot, position=p, intrinsics=intrinsics)


def orbit_pose(
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    intrinsics: CameraIntrinsics,
) -> CameraPose:
    """Pose on the origin-centered orbit sphere, looking at the origin."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    pos = distance * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    return look_at_origin(pos, intrinsics)


@dataclass
class ViewSampler:
    """Progressively widening orbit sampler around a reference view.

    Angular half-ranges expand linearly from (azimuth_start, elevation_start)
    to (azimuth_end, elevation_end) over the first ``expand_fraction`` of
    training, then stay constant.  With probability ``reference_prob`` the
    reference pose object itself is returned, bit-identical.
    """

    reference_pose: CameraPose
    reference_azimuth_deg: float = 0.0
    reference_elevation_deg: float = 0.0
    azimuth_range_deg: tuple[float, float] = (15.0, 180.0)
    elevation_range_deg: tuple[float, float] = (10.0, 45.0)
    distance_range: tuple[float, float] = (0.8, 1.2)
    fov_range_deg: tuple[float, float] = (40.0, 80.0)
    reference_prob: float = 0.25
    expand_fraction: float = 0.6
    resolution: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.resolution is None:
            self.resolution = (
                self.reference_pose.intrinsics.width,
                self.reference_pose.intrinsics.height,
            )
        for lo, hi, name in [
            (*self.azimuth_range_deg, "azimuth"),
            (*self.elevation_range_deg, "elevation"),
            (*self.distance_range, "distance"),
            (*self.fov_range_deg, "fov"),
        ]:
            if lo > hi:
                raise ValidationError(f"{name} range is decreasing: ({lo}, {hi})")
        if not 0.0 <= self.reference_prob <= 1.0:
            raise ValidationError("reference_prob must be in [0, 1]")
        if not 0.0 < self.expand_fraction <= 1.0:
            raise ValidationError("expand_fraction must be in (0, 1]")

    def half_ranges(self, progress: float) -> tuple[float, float]:
        """Current (azimuth, elevation) half-ranges at training progress."""
        s = min(max(progress, 0.0) / self.expand_fraction, 1.0)
        az = self.azimuth_range_deg[0] + s * (self.azimuth_range_deg[1] - self.azimuth_range_deg[0])
        el = self.elevation_range_deg[0] + s * (
            self.elevation_range_deg[1] - self.elevation_range_deg[0]
        )
        return az, el

    def sample(self, rng: np.random.Generator, progress: float) -> CameraPose:
        """Draw one training view.

        Returns the reference pose object itself on the reference branch so
        callers can detect it with an identity check.
        """
        if not 0.0 <= progress <= 1.0:
            raise ValidationError(f"progress must be in [0, 1], got {progress}")
        if rng.uniform() < self.reference_prob:
            return self.reference_pose
        az_half, el_half = self.half_ranges(progress)
        azimuth = self.reference_azimuth_deg + rng.uniform(-az_half, az_half)
        elevation = self.reference_elevation_deg + rng.uniform(-el_half, el_half)
        elevation = float(np.clip(elevation, -MAX_ELEVATION_DEG, MAX_ELEVATION_DEG))
        distance = rng.uniform(*self.distance_range)
        fov = rng.uniform(*self.fov_range_deg)
        intr = CameraIntrinsics(fov, self.resolution[0], self.resolution[1])
        return orbit_pose(azimuth, elevation, distance, intr)


def sample_view(sampler: ViewSampler, rng: np.random.Generator, progress: float) -> CameraPose:
    return sampler.sample(rng, progress)


def generate_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """One ray per pixel: (origins (H, W, 3), unit directions (H, W, 3))."""
    intr = pose.intrinsics
    w, h = intr.width, intr.height
    cx, cy = intr.principal
    f = intr.focal
    i = np.arange(w, dtype=np.float64) + 0.5
    j = np.arange(h, dtype=np.float64) + 0.5
    ii, jj = np.meshgrid(i, j, indexing="xy")
    dirs_cam = np.stack(
        [(ii - cx) / f, -(jj - cy) / f, -np.ones_like(ii)], axis=-1
    )  # (H, W, 3)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def project_points(
    points: np.ndarray, pose: CameraPose
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into a view.

    Returns (pixels (N, 2) continuous (u, v), depth (N,), in_frustum (N,)).
    Depth is the distance along the pixel ray (camera-centered Euclidean
    distance), matching what :func:`generate_rays`-based rendering and
    depth-map lifting use, so the lift -> project round trip is exact.
    Points behind the camera (or at its center) are flagged out-of-frustum
    with their raw projection left untouched, never clamped.
    """
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    intr = pose.intrinsics
    cx, cy = intr.principal
    f = intr.focal

    cam = (pts - pose.position) @ pose.rotation  # world -> camera
    forward = -cam[:, 2]
    safe_fwd = np.where(forward > 1e-12, forward, 1.0)
    u = f * (cam[:, 0] / safe_fwd) + cx
    v = cy - f * (cam[:, 1] / safe_fwd)
    depth = np.linalg.norm(cam, axis=1)
    in_frustum = (
        (forward > 1e-12)
        & (u >= 0.0)
        & (u < intr.width)
        & (v >= 0.0)
        & (v < intr.height)
        & np.isfinite(depth)
    )
    pixels = np.stack([u, v], axis=1)
    if squeeze:
        return pixels[0], depth[0], in_frustum[0]
    return pixels, depth, in_frustum
