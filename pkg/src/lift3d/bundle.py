"""Reference-asset loading: image, matting mask, estimated depth, conditioning.

The depth estimate arrives as a file (the estimator lives in the prior
service or offline): a tiny raster format of 32-bit little-endian floats
behind a 16-byte header {magic "L3DD", u32 width, u32 height, u32 reserved}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ValidationError

DEPTH_MAGIC = b"L3DD"
MIN_MASK_COVERAGE = 0.01
MAX_MASK_COVERAGE = 0.99


@dataclass
class ReferenceBundle:
    """Everything the trainers need about the reference view.

    image: (H, W, 3) float in [0, 1]; mask: (H, W) float in [0, 1];
    depth: (H, W) positive floats of arbitrary scale; conditioning is an
    opaque handle interpreted by the prior backend (prompt string,
    mixture-component id, or a precomputed embedding).
    """

    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    conditioning: object = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("bundle image must be (H, W, 3)", code="bad-image")
        if self.mask.shape != self.image.shape[:2] or self.depth.shape != self.image.shape[:2]:
            raise ValidationError("bundle maps must share one resolution", code="bad-image")
        coverage = float(self.mask.mean())
        if not MIN_MASK_COVERAGE < coverage < MAX_MASK_COVERAGE:
            raise ValidationError(
                f"mask coverage {coverage:.4f} outside ({MIN_MASK_COVERAGE}, {MAX_MASK_COVERAGE})",
                code="degenerate-mask",
            )
        fg = self.mask > 0.5
        fg_depth = self.depth[fg]
        if fg_depth.size and (not np.all(np.isfinite(fg_depth)) or fg_depth.min() <= 0):
            raise ValidationError(
                "depth must be positive and finite over the foreground", code="bad-depth-values"
            )
        if fg_depth.size and float(fg_depth.max() - fg_depth.min()) <= 0.0:
            raise ValidationError("depth has no extent over the foreground", code="bad-depth-values")

    def resized(self, width: int, height: int) -> "ReferenceBundle":
        """Bilinearly resample all maps to a working resolution."""
        if (height, width) == self.image.shape[:2]:
            return self
        return replace(
            self,
            image=_resize(self.image, width, height),
            mask=_resize(self.mask, width, height),
            depth=_resize(self.depth, width, height),
        )


def _resize(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    squeeze = t.ndim == 2
    if squeeze:
        t = t.unsqueeze(-1)
    t = t.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0)
    if squeeze:
        out = out[..., 0]
    return out.numpy()


def write_depth_raster(path, depth: np.ndarray):
    depth = np.ascontiguousarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValidationError("depth raster must be 2-D", code="bad-depth-header")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<III", w, h, 0))
        fh.write(depth.astype("<f4").tobytes())


def read_depth_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"depth file not found: {path}", code="missing-file")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != DEPTH_MAGIC:
        raise ValidationError(f"bad depth raster header in {path}", code="bad-depth-header")
    w, h, _ = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * w * h
    if len(blob) != expected:
        raise ValidationError(
            f"depth raster {path} is {len(blob)} bytes, header says {expected}",
            code="bad-depth-header",
        )
    return np.frombuffer(blob[16:], dtype="<f4").reshape(h, w).astype(np.float64)


def _load_image(path) -> tuple[np.ndarray, np.ndarray | None]:
    """PNG -> float rgb in [0, 1], plus the embedded alpha channel if any."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"image not found: {path}", code="missing-file")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValidationError(f"cannot read image {path}: {exc}", code="bad-image") from exc
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scale = float(np.iinfo(np.uint16).max)
    else:
        raise ValidationError(f"unsupported image dtype {arr.dtype}", code="bad-image")
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    alpha = None
    if arr.shape[2] == 4:
        alpha = arr[:, :, 3]
        arr = arr[:, :, :3]
    elif arr.shape[2] != 3:
        raise ValidationError(f"expected RGB(A) image, got {arr.shape[2]} channels", code="bad-image")
    return arr, alpha


def _load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"mask not found: {path}", code="missing-file")
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    info = np.iinfo(arr.dtype) if np.issubdtype(arr.dtype, np.integer) else None
    return arr.astype(np.float64) / (info.max if info else 1.0)


def load_conditioning(spec):
    """Interpret a conditioning argument: literal int, 'component:N',
    a .txt prompt file, a .json embedding/id file, or a raw prompt string."""
    if spec is None:
        return None
    if isinstance(spec, (int, np.integer)):
        return int(spec)
    text = str(spec)
    p = Path(text)
    if p.suffix == ".txt" and p.exists():
        return p.read_text().strip()
    if p.suffix == ".json" and p.exists():
        import json

        return json.loads(p.read_text())
    return text


def load_bundle(image_path, mask_path=None, depth_path=None, conditioning=None) -> ReferenceBundle:
    """Load and validate the reference assets.

    An RGBA reference with no separate mask file uses its alpha channel as
    the matting mask.  Mask and depth are bilinearly resampled to the image
    resolution.
    """
    image, embedded_alpha = _load_image(image_path)
    h, w = image.shape[:2]
    if mask_path is not None:
        mask = _load_mask(mask_path)
    elif embedded_alpha is not None:
        mask = embedded_alpha
    else:
        raise ValidationError(
            "no mask file and the image has no alpha channel", code="missing-file"
        )
    if depth_path is None:
        raise ValidationError("a depth raster is required", code="missing-file")
    depth = read_depth_raster(depth_path)
    if mask.shape != (h, w):
        mask = _resize(mask, w, h)
    if depth.shape != (h, w):
        depth = _resize(depth, w, h)
    return ReferenceBundle(
        image=image,
        mask=np.clip(mask, 0.0, 1.0),
        depth=depth,
        conditioning=load_conditioning(conditioning),
    )
