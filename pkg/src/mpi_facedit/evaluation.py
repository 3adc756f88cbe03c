"""Edit-quality metrics: distribution distances, identity, efficacy, view consistency.

Features for small-FID and KID come from a fixed random conv stack (global
average pooled per layer). Identity is compared with a second fixed stack
that keeps coarse spatial layout, evaluated with the edited attribute's
region blanked out.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import oracles
from .errors import DataError, ShapeError, ValidationError
from .generator import Generator, map_latent, render_w, synthesize_mpi
from .inversion import PerceptualFeatureExtractor, to_tensor
from .latent import EditDirection, apply_edit, broadcast, compose_edits, reduce_wplus, sample_z
from .renderer import render_orbit

# -- distribution distances ---------------------------------------------------------

_FEATURES = PerceptualFeatureExtractor(channels=(16, 32, 64), seed=1234)


def image_features(images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Per-layer global-average-pooled features, ``(n, 112)`` float64."""
    x = to_tensor(images)
    out = []
    with torch.no_grad():
        for s in range(0, x.shape[0], batch):
            h = x[s : s + batch] * 2.0 - 1.0
            pooled = []
            for i, conv in enumerate(_FEATURES.convs):
                if i > 0:
                    h = F.avg_pool2d(h, 2)
                h = F.leaky_relu(conv(h), 0.2)
                pooled.append(h.mean(dim=(2, 3)))
            out.append(torch.cat(pooled, dim=1))
    return torch.cat(out).double().numpy()


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((cov_a cov_b)^1/2)`` is computed as the trace of the square root of
    the symmetric matrix ``cov_a^1/2 cov_b cov_a^1/2``, which has the same
    eigenvalues.
    """
    ra = _sqrtm_psd(cov_a)
    vals = np.linalg.eigvalsh(ra @ cov_b @ ra)
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d, 0.0)


def _check_sets(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) < 2 or len(b) < 2:
        raise DataError(f"each set needs at least 2 images, got {len(a)} and {len(b)}")


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    _check_sets(fa, fb)
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def small_fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    _check_sets(set_a, set_b)
    return fid_from_features(image_features(set_a), image_features(set_b))


def kid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y / d + 1)^3``."""
    _check_sets(fa, fb)
    d = fa.shape[1]
    kxx = (fa @ fa.T / d + 1.0) ** 3
    kyy = (fb @ fb.T / d + 1.0) ** 3
    kxy = (fa @ fb.T / d + 1.0) ** 3
    m, n = len(fa), len(fb)
    return float(
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2.0 * kxy.mean()
    )


def kid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    _check_sets(set_a, set_b)
    return kid_from_features(image_features(set_a), image_features(set_b))


# -- identity -----------------------------------------------------------------------

_IDENTITY = PerceptualFeatureExtractor(channels=(16, 32), seed=4321)

# image regions (row span as fractions of height) each edit is expected to touch
ATTRIBUTE_REGIONS = {
    "glasses": (0.30, 0.66),
    "hat": (0.0, 0.40),
    "smile": (0.60, 0.85),
    "aged": None,
}


def attribute_region(attribute: str, size: int) -> np.ndarray:
    """Boolean ``(size, size)`` mask of the rows an attribute edit may change."""
    mask = np.zeros((size, size), dtype=bool)
    span = ATTRIBUTE_REGIONS.get(attribute)
    if span is not None:
        mask[int(math.floor(span[0] * size)) : int(math.ceil(span[1] * size))] = True
    return mask


def identity_embedding(images: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Unit-norm embedding of the face outside ``mask``.

    Masked pixels are set to mid-grey. Features of the last layer are
    pooled to a 4x4 grid, centred per channel over that grid and flattened.
    Returns ``(n, F)`` (or ``(F,)`` for one image).
    """
    single = np.asarray(images).ndim == 3
    x = to_tensor(images)
    if mask is not None:
        m = torch.as_tensor(np.asarray(mask, dtype=bool))
        if m.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"mask {tuple(m.shape)} does not match images {tuple(x.shape[-2:])}")
        m = m.reshape(-1, 1, *x.shape[-2:]).to(x.dtype)
        x = x * (1.0 - m) + 0.5 * m
    with torch.no_grad():
        h = x * 2.0 - 1.0
        for i, conv in enumerate(_IDENTITY.convs):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.leaky_relu(conv(h), 0.2)
        h = F.adaptive_avg_pool2d(h, 4)
        h = h - h.mean(dim=(2, 3), keepdim=True)
        e = h.flatten(1).double()
    e = e / e.norm(dim=1, keepdim=True).clamp_min(1e-12)
    e = e.numpy()
    return e[0] if single else e


def identity_metrics(original: np.ndarray, edited: np.ndarray, attribute_mask: np.ndarray | None = None) -> tuple[float, float]:
    """Euclidean distance and cosine similarity of masked identity embeddings."""
    if np.shape(original) != np.shape(edited):
        raise ShapeError(f"images differ in shape: {np.shape(original)} vs {np.shape(edited)}")
    a = identity_embedding(original, attribute_mask)
    b = identity_embedding(edited, attribute_mask)
    ed = np.linalg.norm(a - b, axis=-1)
    cs = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    if np.ndim(ed) == 0:
        return float(ed), float(cs)
    return ed, cs


# -- efficacy -----------------------------------------------------------------------


@dataclass
class EfficacyResult:
    """Outcome of editing ``n`` attribute-negative samples."""

    attribute: str
    scale: float
    flipped: np.ndarray
    cs: np.ndarray
    ed: np.ndarray
    base: np.ndarray
    edited: np.ndarray
    w: np.ndarray

    @property
    def n(self) -> int:
        return int(self.flipped.size)

    @property
    def efficacy(self) -> float:
        return float(self.flipped.mean()) if self.flipped.size else 0.0

    @property
    def mean_cs(self) -> float:
        return float(self.cs.mean()) if self.cs.size else float("nan")


def negative_latents(
    generator: Generator, attribute: str | Sequence[str], n: int, seed: int = 0, max_draws: int = 20
) -> tuple[np.ndarray, np.ndarray]:
    """Draw W latents whose reference renders are negative for every listed attribute.

    Returns up to ``n`` latents and their renders; gives up after
    ``max_draws * n`` candidates.
    """
    attrs = [attribute] if isinstance(attribute, str) else list(attribute)
    ws, imgs = [], []
    have, chunk = 0, 0
    while have < n and chunk < max_draws:
        w = map_latent(generator, sample_z(4 * n, generator.cfg.latent_dim, seed * 7919 + chunk))
        x = render_w(generator, w)
        keep = np.ones(len(w), dtype=bool)
        for a in attrs:
            keep &= ~oracles.detect_batch(a, x)
        ws.append(w[keep])
        imgs.append(x[keep])
        have += int(keep.sum())
        chunk += 1
    return np.concatenate(ws)[:n], np.concatenate(imgs)[:n]


def attribute_efficacy(
    direction: EditDirection,
    n_samples: int,
    generator: Generator,
    encoder=None,
    seed: int = 0,
    scale: float = 1.0,
    attribute: str | None = None,
) -> EfficacyResult:
    """Fraction of held-out attribute-negative samples the edit turns positive.

    Samples are mapping-network latents whose reference render is negative
    under the attribute oracle. If ``encoder`` is given, each render is
    inverted and the edit applied to the inverted (row-averaged) latent
    instead, i.e. the real-image editing path.
    """
    attr = attribute or direction.attribute_name
    w, base = negative_latents(generator, attr, n_samples, seed)
    if encoder is not None:
        from .inversion import invert

        w = reduce_wplus(invert(base, encoder))
        base = render_w(generator, w)
    edited = render_w(generator, apply_edit(w, direction, scale))
    flipped = oracles.detect_batch(attr, edited)
    ed, cs = identity_metrics(base, edited, attribute_region(attr, generator.cfg.image_size))
    return EfficacyResult(attr, float(scale), flipped, np.atleast_1d(cs), np.atleast_1d(ed), base, edited, w)


@dataclass
class SequentialResult:
    attributes: list[str]
    all_flipped: np.ndarray
    step_cs: dict[str, float]
    solo_cs: dict[str, float]
    frames: np.ndarray

    @property
    def joint_efficacy(self) -> float:
        return float(self.all_flipped.mean()) if self.all_flipped.size else 0.0


def sequential_efficacy(
    directions: Sequence[EditDirection], n_samples: int, generator: Generator, seed: int = 0, scale: float = 1.0
) -> SequentialResult:
    """Apply edits one after another to samples negative for all of them.

    ``all_flipped`` marks samples where every oracle fires on the final
    image. ``step_cs[a]`` is the mean masked cosine similarity across the
    step that adds ``a``; ``solo_cs[a]`` is the same for ``a`` applied alone
    to the base sample. ``frames`` is ``(n, len+1, H, W, 3)``: base, then
    each cumulative edit.
    """
    attrs = [d.attribute_name for d in directions]
    w, base = negative_latents(generator, attrs, n_samples, seed)
    size = generator.cfg.image_size
    frames = [base]
    step_cs, solo_cs = {}, {}
    for i, d in enumerate(directions):
        cur = render_w(generator, compose_edits(w, [(dd, scale) for dd in directions[: i + 1]]))
        region = attribute_region(d.attribute_name, size)
        step_cs[d.attribute_name] = float(np.mean(identity_metrics(frames[-1], cur, region)[1]))
        solo = render_w(generator, apply_edit(w, d, scale))
        solo_cs[d.attribute_name] = float(np.mean(identity_metrics(base, solo, region)[1]))
        frames.append(cur)
    final = frames[-1]
    ok = np.ones(len(w), dtype=bool)
    for a in attrs:
        ok &= oracles.detect_batch(a, final)
    return SequentialResult(attrs, ok, step_cs, solo_cs, np.stack(frames, axis=1))


# -- multi-view consistency ---------------------------------------------------------


@dataclass
class ViewConsistency:
    """Oracle margins (score minus threshold) per view and identity agreement with the frontal view."""

    margins: np.ndarray
    identity_cs: np.ndarray
    views: np.ndarray

    @property
    def consistency(self) -> float:
        return float(self.margins.min())

    @property
    def fires_in_all_views(self) -> bool:
        return bool(np.all(self.margins >= 0.0))

    @property
    def mean_identity_cs(self) -> float:
        return float(self.identity_cs.mean())


def view_consistency(
    wp: np.ndarray,
    direction: EditDirection | None,
    n_views: int,
    generator: Generator,
    yaw_range: float = 60.0,
    scale: float = 1.0,
    attribute: str | None = None,
) -> ViewConsistency:
    """Render the (edited) sample along a yaw orbit and score each view.

    The edit is applied in W: ``wp`` is row-averaged, shifted and broadcast
    again. ``identity_cs`` compares each view with the middle (frontal-most)
    view outside the attribute region.
    """
    if n_views < 2:
        raise ValidationError(f"view consistency needs n_views >= 2, got {n_views}")
    wp = np.asarray(wp, dtype=np.float64)
    if wp.shape != (generator.cfg.t, generator.cfg.latent_dim):
        raise ShapeError(f"W+ must be {(generator.cfg.t, generator.cfg.latent_dim)}, got {wp.shape}")
    if direction is not None:
        wp = broadcast(apply_edit(reduce_wplus(wp), direction, scale), generator.cfg.t)
    attr = attribute or (direction.attribute_name if direction is not None else None)
    if attr is None:
        raise ValidationError("an attribute name is needed when no direction is given")
    mpi = synthesize_mpi(generator, wp)
    views = np.stack([v.rgb.permute(1, 2, 0).double().numpy() for v in render_orbit(mpi, n_views, yaw_range)])
    margins = np.array([oracles.score(attr, v) - oracles.THRESHOLDS[attr] for v in views])
    region = attribute_region(attr, generator.cfg.image_size)
    ref = np.repeat(views[n_views // 2][None], n_views, axis=0)
    _, cs = identity_metrics(ref, views, region)
    return ViewConsistency(margins, np.atleast_1d(cs), views)


# -- report ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    fid: float
    kid: float
    ed: float
    cs: float
    efficacy: dict[str, float] = field(default_factory=dict)
    view_consistency: float = float("nan")

    def __post_init__(self) -> None:
        if not -1.0 - 1e-9 <= self.cs <= 1.0 + 1e-9:
            raise ValidationError(f"cs must lie in [-1, 1], got {self.cs}")
        for k, v in self.efficacy.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"efficacy for {k!r} must lie in [0, 1], got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def to_markdown(self, name: str = "ours") -> str:
        head = "| method | FID (small) ↓ | KID ↓ | ED ↓ | CS ↑ |"
        row = f"| {name} | {self.fid:.3f} | {self.kid:.4f} | {self.ed:.3f} | {self.cs:.3f} |"
        lines = [head, "|---|---|---|---|---|", row, ""]
        if self.efficacy:
            lines += ["| attribute | efficacy |", "|---|---|"]
            lines += [f"| {k} | {v:.2f} |" for k, v in sorted(self.efficacy.items())]
            lines.append("")
        if not math.isnan(self.view_consistency):
            lines.append(f"view consistency: {self.view_consistency:.2f}")
            lines.append("")
        return "\n".join(lines)
