"""Programmatic attribute detectors for procedural (and generated) faces.

Each oracle maps an ``(H, W, 3)`` float image in [0, 1] to a scalar score and
fires when the score crosses a fixed threshold. Regions are fractions of the
image so the detectors work at any resolution, and they search over a band
wide enough to tolerate the parallax of a +-30 degree orbit.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DARK_LUMA = 0.3
# out-of-frame pixels render pure black; they are not part of the face
VOID_LUMA = 0.03


def luma(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def saturation(img: np.ndarray) -> np.ndarray:
    mx, mn = img.max(axis=-1), img.min(axis=-1)
    return np.where(mx > 1e-6, (mx - mn) / np.maximum(mx, 1e-6), 0.0)


def _band(h: int, lo: float, hi: float) -> slice:
    return slice(int(np.floor(lo * h)), int(np.ceil(hi * h)))


def _dark_run_score(img: np.ndarray, rows: tuple[float, float], window: float) -> float:
    """Best fraction of dark pixels in any horizontal window within a row band."""
    h, w = img.shape[:2]
    y = luma(img[_band(h, *rows)])
    dark = ((y < DARK_LUMA) & (y >= VOID_LUMA)).astype(np.float64)
    ww = max(1, int(round(window * w)))
    csum = np.concatenate([np.zeros((dark.shape[0], 1)), np.cumsum(dark, axis=1)], axis=1)
    sums = csum[:, ww:] - csum[:, :-ww]
    return float(sums.max() / ww) if sums.size else 0.0


def glasses_score(img: np.ndarray) -> float:
    return _dark_run_score(np.asarray(img), (0.36, 0.64), 0.375)


def hat_score(img: np.ndarray) -> float:
    return _dark_run_score(np.asarray(img), (0.14, 0.34), 0.5)


def aged_score(img: np.ndarray) -> float:
    """One minus the median skin saturation of the lower-cheek patch."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    patch = img[_band(h, 0.585, 0.645), _band(w, 0.3, 0.7)]
    return float(1.0 - np.median(saturation(patch)))


def smile_score(img: np.ndarray) -> float:
    """Upward bend (pixels) of the mouth line between its centre and corners.

    Mouth pixels are those clearly darker than the median of the lower-face
    region. The mouth is the contiguous run of such columns nearest the
    image centre; a weighted parabola through the per-column row centroids
    gives the bend, positive when the corners sit above the centre.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    region = luma(img[_band(h, 0.63, 0.79), _band(w, 0.35, 0.65)])
    weight = np.clip(np.median(region) - region - 0.05, 0.0, None)
    weight[region < VOID_LUMA] = 0.0
    mass = weight.sum(axis=0)
    active = mass > 0.05
    centre = active.size // 2
    on = np.flatnonzero(active)
    if on.size == 0:
        return 0.0
    seed = on[np.argmin(np.abs(on - centre + 0.5))]
    lo, hi = seed, seed + 1
    while lo > 0 and active[lo - 1]:
        lo -= 1
    while hi < active.size and active[hi]:
        hi += 1
    best = (lo, hi)
    if hi - lo < 4:
        return 0.0
    cols = np.arange(*best)
    rows = np.arange(region.shape[0])[:, None]
    centroid = (weight[:, cols] * rows).sum(axis=0) / np.maximum(mass[cols], 1e-9)
    x = (cols - cols.mean()) / max(1.0, (cols.size - 1) / 2.0)
    curvature = np.polyfit(x, centroid, 2, w=np.sqrt(mass[cols]))[0]
    return float(-curvature)


SCORES: dict[str, Callable[[np.ndarray], float]] = {
    "glasses": glasses_score,
    "hat": hat_score,
    "aged": aged_score,
    "smile": smile_score,
}
THRESHOLDS = {"glasses": 0.5, "hat": 0.6, "aged": 0.8, "smile": 0.4}


def score(attribute: str, img: np.ndarray) -> float:
    return SCORES[attribute](img)


def detect(attribute: str, img: np.ndarray) -> bool:
    return score(attribute, img) >= THRESHOLDS[attribute]


def detect_batch(attribute: str, imgs: np.ndarray) -> np.ndarray:
    return np.array([detect(attribute, im) for im in imgs], dtype=bool)
