"""Command-line interface.

Subcommands: coarse, cloud, refine, turntable, field-info, validate-bundle.
Exit codes: 0 success, 2 validation, 3 prior backend, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import camera as cam
from . import reporting
from .backends import backend_from_config
from .bundle import load_bundle
from .checkpoint import KIND_FIELD, KIND_REFINE
from .config import RunConfig
from .errors import Lift3DError, ValidationError

log = logging.getLogger("lift3d")


def _add_bundle_args(p, mask_required=False):
    p.add_argument("--image", required=True, help="reference RGB(A) PNG")
    p.add_argument("--mask", default=None, help="foreground matting mask PNG")
    p.add_argument("--depth", required=True, help="estimated depth raster (L3DD format)")
    p.add_argument(
        "--conditioning",
        default=None,
        help="prompt text/file, embedding JSON, or oracle mixture-component id",
    )


def _load_args_bundle(args):
    return load_bundle(args.image, args.mask, args.depth, args.conditioning)


def _load_config(args) -> RunConfig:
    config = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def cmd_coarse(args):
    from .coarse import field_from_config, schedule_from_config, train_coarse

    config = _load_config(args)
    bundle = _load_args_bundle(args)
    schedule = schedule_from_config(config)
    backend = backend_from_config(config, schedule, bundle)
    field = field_from_config(config)
    result = train_coarse(field, bundle, backend, config, run_dir=args.out)
    final = [m for m in result.metrics if "loss_total" in m]
    log.info("coarse stage done: %d iterations, final loss %.4f",
             len(result.metrics), final[-1]["loss_total"] if final else float("nan"))
    print(f"coarse run complete -> {args.out}")
    return 0


def cmd_cloud(args):
    from .coarse import load_field_checkpoint, reference_pose, render_config
    from .pointcloud import build_cloud, ring_poses, save_cloud

    field, grid, config = load_field_checkpoint(args.checkpoint)
    bundle = _load_args_bundle(args)
    res = config.cloud.resolution or config.coarse.resolution
    ref_pose = reference_pose(config, res)
    novel = ring_poses(
        config.camera, res, config.cloud.ring_azimuth_steps,
        config.cloud.ring_elevations_deg,
    )
    from .pointcloud import SCENE_DIAMETER

    cloud = build_cloud(
        field,
        bundle,
        ref_pose,
        novel,
        alpha_threshold=config.cloud.alpha_threshold,
        depth_tolerance=config.cloud.merge_tolerance_frac * SCENE_DIAMETER,
        render_cfg=render_config(config),
        grid=grid,
        seed=config.seed,
    )
    save_cloud(args.out, cloud)
    config.write_effective(args.out)
    print(f"cloud with {len(cloud)} points -> {args.out}")
    return 0


def cmd_refine(args):
    from .coarse import schedule_from_config
    from .deferred import train_refine
    from .pointcloud import load_cloud

    config = _load_config(args)
    cloud = load_cloud(args.cloud)
    bundle = _load_args_bundle(args)
    schedule = schedule_from_config(config)
    backend = backend_from_config(config, schedule, bundle, config.refine.resolution)
    result = train_refine(cloud, bundle, backend, config, run_dir=args.out)
    print(f"refine run complete ({len(result.metrics)} iterations) -> {args.out}")
    return 0


def cmd_turntable(args):
    run = Path(args.run)
    out = Path(args.out)
    frames = []
    if (run / "refine.l3d").exists():
        from .deferred import load_refine_checkpoint, render_deferred

        model, config = load_refine_checkpoint(run / "refine.l3d")
        res = config.refine.resolution
        intr = cam.CameraIntrinsics(config.camera.reference_fov_deg, res, res)
        for k in range(args.frames):
            pose = cam.orbit_pose(
                360.0 * k / args.frames,
                config.camera.reference_elevation_deg,
                config.camera.reference_distance,
                intr,
            )
            with torch.no_grad():
                img = render_deferred(model, pose).numpy()
            frames.append(img)
            reporting.save_png(out / f"frame{k:04d}.png", img)
    elif (run / "field.l3d").exists():
        from .coarse import load_field_checkpoint, render_config
        from .render import WHITE, render

        field, grid, config = load_field_checkpoint(run / "field.l3d")
        res = config.coarse.resolution
        intr = cam.CameraIntrinsics(config.camera.reference_fov_deg, res, res)
        for k in range(args.frames):
            pose = cam.orbit_pose(
                360.0 * k / args.frames,
                config.camera.reference_elevation_deg,
                config.camera.reference_distance,
                intr,
            )
            with torch.no_grad():
                outp = render(field, pose, WHITE, config=render_config(config), grid=grid)
            frames.append(outp.rgb_numpy())
            reporting.save_png(out / f"frame{k:04d}.png", frames[-1])
    else:
        raise ValidationError(f"no field.l3d or refine.l3d under {run}", code="missing-file")
    reporting.save_turntable_sheet(out / "turntable.png", frames[:: max(1, len(frames) // 12)])
    print(f"{len(frames)} frames -> {out}")
    return 0


def cmd_field_info(args):
    from .checkpoint import load_checkpoint

    kind, config, tensors = load_checkpoint(args.checkpoint)
    print(f"kind: {kind}")
    print(f"config hash: {RunConfig.from_dict(config).config_hash()[:16]}")
    if kind == KIND_FIELD:
        n_params = sum(
            int(np.prod(v.shape)) for k, v in tensors.items()
            if k.startswith("field.") and torch.is_tensor(v)
        )
        occ = tensors["occupancy"]
        print(f"field parameters: {n_params}")
        print(
            f"occupancy grid: {tuple(occ.shape)}, "
            f"{float(occ.float().mean()) * 100:.1f}% occupied"
        )
    elif kind == KIND_REFINE:
        n = tensors["positions"].shape[0]
        frozen = int(tensors["model.frozen_mask"].sum())
        print(f"points: {n} ({frozen} frozen reference points)")
    return 0


def cmd_validate_bundle(args):
    bundle = _load_args_bundle(args)
    h, w = bundle.image.shape[:2]
    print(f"ok: {w}x{h} image, mask coverage {bundle.mask.mean():.3f}, "
          f"depth range [{bundle.depth.min():.3g}, {bundle.depth.max():.3g}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lift3d",
        description="Two-stage single-image-to-3D optimization engine",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coarse", help="stage 1: fit a radiance field to one image")
    _add_bundle_args(p)
    p.add_argument("--config", default=None, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_coarse)

    p = sub.add_parser("cloud", help="stage 2a: export a textured point cloud")
    p.add_argument("--checkpoint", required=True, help="stage-1 field checkpoint")
    _add_bundle_args(p)
    p.add_argument("--out", required=True, help="cloud directory")
    p.set_defaults(fn=cmd_cloud)

    p = sub.add_parser("refine", help="stage 2b: optimize descriptors + renderer")
    p.add_argument("--cloud", required=True, help="cloud directory")
    _add_bundle_args(p)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("turntable", help="render an orbit of PNG frames")
    p.add_argument("--run", required=True, help="coarse or refine run directory")
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_turntable)

    p = sub.add_parser("field-info", help="print a checkpoint summary")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_field_info)

    p = sub.add_parser("validate-bundle", help="check reference assets")
    _add_bundle_args(p)
    p.set_defaults(fn=cmd_validate_bundle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    try:
        return args.fn(args)
    except Lift3DError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
