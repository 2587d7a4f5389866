"""Analytic test scenes: a textured sphere rendered in closed form.

These renders never touch the volume renderer, so they serve as an
independent ground truth for fitting, lifting, and occlusion tests.
"""

import numpy as np

from lift3d import camera as cam

SPHERE_RADIUS = 0.35


def sphere_texture(points: np.ndarray) -> np.ndarray:
    """Smooth rgb texture on the sphere surface, range well inside [0, 1]."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return np.stack(
        [
            0.5 + 0.3 * np.sin(4.0 * x + 1.0),
            0.5 + 0.3 * np.sin(4.0 * y + 2.0),
            0.5 + 0.3 * np.cos(4.0 * z + 3.0),
        ],
        axis=-1,
    )


def render_sphere(pose: cam.CameraPose, radius: float = SPHERE_RADIUS, background=1.0):
    """Closed-form ray-traced sphere: (rgb, depth, mask).

    Depth is distance along the unit pixel ray (0 where the ray misses),
    matching the pipeline's depth convention.
    """
    origins, dirs = cam.generate_rays(pose)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    b = np.sum(o * d, axis=1)
    c = np.sum(o * o, axis=1) - radius**2
    disc = b * b - c
    hit = disc > 0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), 0.0)
    hit &= t > 0
    pts = o + t[:, None] * d
    rgb = np.full((o.shape[0], 3), float(background))
    rgb[hit] = sphere_texture(pts[hit])
    h, w = origins.shape[:2]
    return (
        rgb.reshape(h, w, 3),
        np.where(hit, t, 0.0).reshape(h, w),
        hit.reshape(h, w).astype(np.float64),
    )


def sphere_bundle(resolution: int = 64, fov: float = 60.0, distance: float = 1.0,
                  conditioning=0):
    """Reference bundle for the sphere task (depth prior is an arbitrary
    positive affine map of the true depth, exercising scale invariance)."""
    from lift3d.bundle import ReferenceBundle

    intr = cam.CameraIntrinsics(fov, resolution, resolution)
    pose = cam.orbit_pose(0.0, 0.0, distance, intr)
    rgb, depth, mask = render_sphere(pose)
    prior_depth = np.where(mask > 0.5, 2.0 * depth + 0.3, 0.3)
    image = rgb * mask[..., None] + (1.0 - mask[..., None])  # white background
    return ReferenceBundle(image=image, mask=mask, depth=prior_depth, conditioning=conditioning), pose


def ring_poses(n: int, resolution: int, fov: float = 60.0, distance: float = 1.0,
               elevation: float = 0.0, offset: float = 0.0):
    intr = cam.CameraIntrinsics(fov, resolution, resolution)
    return [
        cam.orbit_pose(offset + 360.0 * k / n, elevation, distance, intr) for k in range(n)
    ]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)
