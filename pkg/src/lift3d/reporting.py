"""Run-directory artifacts: NDJSON metrics, PNG renders, matplotlib figures."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def write_metrics(path, records: list[dict]):
    """One JSON object per line; purely numeric so runs hash stably."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_png(path, image):
    """Save an (H, W, 3) or (H, W) float array in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(image, dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_loss_curves(path, records: list[dict], keys=None):
    """Loss components vs iteration, rendered to a PNG figure."""
    if not records:
        return
    if keys is None:
        keys = sorted(
            k
            for k in records[0]
            if k.startswith(("loss", "l_", "reg_")) and isinstance(records[0][k], (int, float))
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    iters = [r.get("iter", i) for i, r in enumerate(records)]
    for key in keys:
        ys = [r.get(key) for r in records]
        xs = [i for i, y in zip(iters, ys) if y is not None]
        vals = [y for y in ys if y is not None]
        if vals:
            ax.plot(xs, vals, label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_turntable_sheet(path, frames: list[np.ndarray], cols: int = 6):
    """Contact sheet of orbit frames for quick inspection."""
    if not frames:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = (len(frames) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows))
    axes = np.atleast_2d(axes)
    for ax in axes.ravel():
        ax.axis("off")
    for i, frame in enumerate(frames):
        axes[i // cols, i % cols].imshow(np.clip(frame, 0, 1))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
