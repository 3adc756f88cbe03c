"""Figure and image-file output: contact sheets, orbit frames, loss curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    """RGB float image in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth_png(path: str | Path, depth: np.ndarray, d_near: float, d_far: float) -> None:
    """16-bit PNG of depth normalised so ``d_near -> 0`` and ``d_far -> 65535``."""
    d = np.clip((np.asarray(depth, dtype=np.float64) - d_near) / (d_far - d_near), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(d * 65535.0).astype(np.uint16)).save(path)


def load_depth_png(path: str | Path, d_near: float, d_far: float) -> np.ndarray:
    with Image.open(path) as im:
        d = np.asarray(im, dtype=np.float64) / 65535.0
    return d_near + d * (d_far - d_near)


def contact_sheet(
    images: np.ndarray,
    path: str | Path,
    row_labels: Sequence[str] | None = None,
    col_labels: Sequence[str] | None = None,
    title: str | None = None,
    cell_inches: float = 1.2,
) -> None:
    """Save a grid figure from ``(rows, cols, H, W, 3)`` images."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[None]
    rows, cols = images.shape[:2]
    fig, axes = plt.subplots(rows, cols, figsize=(cols * cell_inches, rows * cell_inches), squeeze=False)
    for r in range(rows):
        for c in range(cols):
            ax = axes[r][c]
            ax.imshow(to_uint8(images[r, c]), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if col_labels is not None and r == 0:
                ax.set_title(col_labels[c], fontsize=8)
            if row_labels is not None and c == 0:
                ax.set_ylabel(row_labels[r], fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_frames(frames: np.ndarray, directory: str | Path, prefix: str = "frame") -> list[Path]:
    """Write ``(n, H, W, 3)`` frames as ``prefix_000.png``, ``prefix_001.png``, ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = directory / f"{prefix}_{i:03d}.png"
        save_png(p, f)
        paths.append(p)
    return paths


def loss_curves(records: Sequence[dict], keys: Sequence[str], path: str | Path, title: str = "") -> None:
    """Plot the chosen loss keys against ``step`` with light smoothing."""
    steps = np.array([r["step"] for r in records])
    fig, ax = plt.subplots(figsize=(5, 3))
    for k in keys:
        y = np.array([r[k] for r in records], dtype=np.float64)
        win = max(1, len(y) // 50)
        smooth = np.convolve(y, np.ones(win) / win, mode="valid")
        ax.plot(steps[win - 1 :], smooth, label=k)
    ax.set_xlabel("step")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
