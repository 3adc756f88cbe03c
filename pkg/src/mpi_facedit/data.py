"""Procedural labelled faces, cut-and-paste pair construction, external ingestion.

Faces are drawn as a handful of RGBA layers (background, head, eyes, mouth,
glasses, hat) placed on MPI plane depths and rendered through the same
homography/compositing path as generated MPIs, so yaw/pitch parallax is
consistent with what the generator can represent.

Mask conventions:

* attribute masks (``glasses``, ``hat``, ``smile``, ``aged``) mark pixels where
  the attribute is what you see (compositing weight > 0.5), so they never
  overlap the background;
* part masks (``eyes``, ``mouth``, ``head``) are footprints of the layer alpha,
  regardless of occlusion. They anchor the alignment of pasted regions.
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError, IngestionError, ShapeError
from .renderer import Camera, composite, homography_stack, plane_depths, warp

log = logging.getLogger(__name__)

ATTRIBUTES = ("glasses", "hat", "smile", "aged")
PARTS = ("eyes", "mouth", "head")
# part whose centroid anchors the paste of each attribute region
ANCHOR_PART = {"glasses": "eyes", "hat": "head", "smile": "mouth"}


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 32
    n_planes: int = 16
    d_near: float = 1.0
    d_far: float = 2.0
    yaw_range: float = 20.0
    pitch_range: float = 8.0
    supersample: int = 4

    @property
    def depths(self) -> np.ndarray:
        return plane_depths(self.n_planes, self.d_near, self.d_far)

    @property
    def pivot_depth(self) -> float:
        return float(self.depths[self.n_planes // 2])

    def plane_index(self, layer: str) -> int:
        mid = self.n_planes // 2
        offsets = {"head": 0, "eyes": -1, "mouth": -1, "glasses": -3, "hat": -4}
        if layer == "background":
            return self.n_planes - 1
        return max(0, mid + offsets[layer])


@dataclass(frozen=True)
class FaceParams:
    """Everything needed to redraw one face."""

    skin_hsv: tuple[float, float, float]
    hair_hsv: tuple[float, float, float]
    background_hsv: tuple[float, float, float]
    eye_rgb: tuple[float, float, float]
    head_center: tuple[float, float]
    head_axes: tuple[float, float]
    hairline: float
    long_hair: bool
    eye_spacing: float
    mouth_halfwidth: float
    glasses: bool
    lens_hsv: tuple[float, float, float]
    lens_alpha: float
    lens_halfsize: tuple[float, float]
    hat: bool
    hat_hsv: tuple[float, float, float]
    smile: bool
    mouth_curve: float
    aged: bool
    yaw: float
    pitch: float
    ood_texture: float = 0.0

    @property
    def attributes(self) -> dict[str, bool]:
        return {a: bool(getattr(self, a)) for a in ATTRIBUTES}


def sample_face(
    rng: np.random.Generator,
    cfg: DatasetConfig,
    attributes: Mapping[str, bool] | None = None,
) -> FaceParams:
    """Draw face parameters; attributes default to independent fair coin flips."""
    u = rng.uniform
    flips = {a: bool(rng.random() < 0.5) for a in ATTRIBUTES}
    if attributes:
        flips.update({k: bool(v) for k, v in attributes.items()})
    smile_curve = u(0.06, 0.07)
    return FaceParams(
        skin_hsv=(u(0.03, 0.10), u(0.35, 0.6), u(0.65, 0.95)),
        hair_hsv=(u(0.04, 0.14), u(0.3, 0.7), u(0.5, 0.9)),
        background_hsv=(u(0.0, 1.0), u(0.1, 0.5), u(0.55, 0.95)),
        eye_rgb=tuple(float(c) for c in u(0.02, 0.15, size=3)),
        head_center=(0.5 + u(-0.02, 0.02), u(0.52, 0.56)),
        head_axes=(u(0.24, 0.29), u(0.30, 0.35)),
        hairline=u(0.3, 0.55),
        long_hair=bool(rng.random() < 0.5),
        eye_spacing=u(0.10, 0.12),
        mouth_halfwidth=u(0.07, 0.10),
        glasses=flips["glasses"],
        lens_hsv=(u(0.0, 1.0), u(0.0, 0.5), u(0.06, 0.2)),
        lens_alpha=u(0.82, 0.95),
        lens_halfsize=(u(0.08, 0.09), u(0.045, 0.06)),
        hat=flips["hat"],
        hat_hsv=(u(0.0, 1.0), u(0.3, 0.8), u(0.1, 0.25)),
        smile=flips["smile"],
        mouth_curve=smile_curve if flips["smile"] else u(-0.005, 0.005),
        aged=flips["aged"],
        yaw=u(-cfg.yaw_range, cfg.yaw_range),
        pitch=u(-cfg.pitch_range, cfg.pitch_range),
    )


def _rgb(hsv: Sequence[float]) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(*hsv))


def _aged_hsv(hsv: Sequence[float], kind: str) -> tuple[float, float, float]:
    h, s, v = hsv
    if kind == "skin":
        return (h, s * 0.2, v * 0.92)
    return (h, 0.05, 0.75)


def _coverage(inside: np.ndarray, ss: int) -> np.ndarray:
    """Box-filter a supersampled boolean mask down to fractional coverage."""
    n = inside.shape[0] // ss
    return inside.reshape(n, ss, n, ss).mean(axis=(1, 3))


def face_layers(p: FaceParams, cfg: DatasetConfig) -> list[tuple[str, np.ndarray, int]]:
    """Reference-view RGBA layers ``(name, (4, H, W) array, plane index)``, back to front."""
    size, ss = cfg.image_size, cfg.supersample
    n = size * ss
    g = (np.arange(n) + 0.5) / n
    v, u = np.meshgrid(g, g, indexing="ij")
    cx, cy = p.head_center
    a, b = p.head_axes

    skin_hsv = _aged_hsv(p.skin_hsv, "skin") if p.aged else p.skin_hsv
    hair_hsv = _aged_hsv(p.hair_hsv, "hair") if p.aged else p.hair_hsv

    def layer(color_map: np.ndarray, inside: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        cov = _coverage(inside, ss) * alpha
        if color_map.ndim == 1:
            col = np.broadcast_to(color_map[:, None, None], (3, size, size))
        else:
            col = np.stack([_coverage(color_map[c], ss) for c in range(3)])
        return np.concatenate([col, cov[None]], axis=0)

    layers = []
    bg = _rgb(p.background_hsv)
    bg_map = bg[:, None, None] * (1.0 - 0.15 * v)[None]
    if p.ood_texture > 0:
        stripes = (np.floor(u * n / ss / 2) + np.floor(v * n / ss / 2)) % 2
        bg_map = np.clip(bg_map * (1 - p.ood_texture * stripes[None]), 0, 1)
    layers.append(("background", layer(bg_map, np.ones_like(u, dtype=bool)), cfg.plane_index("background")))

    head = ((u - cx) / a) ** 2 + ((v - cy) / b) ** 2 <= 1.0
    hair_outer = ((u - cx) / (a + 0.025)) ** 2 + ((v - cy + 0.01) / (b + 0.03)) ** 2 <= 1.0
    hair = hair_outer & (v < cy - b * p.hairline)
    if p.long_hair:
        hair |= hair_outer & ~head & (v < cy + 0.2)
        hair |= (np.abs(u - cx) > a - 0.01) & (np.abs(u - cx) < a + 0.05) & (v > cy - 0.1) & (v < cy + 0.2)
    skin = _rgb(skin_hsv)
    head_col = np.broadcast_to(skin[:, None, None], (3, n, n)).copy()
    if p.aged:
        for k in range(3):
            line = np.abs(v - (cy - b * 0.62 + 0.035 * k)) < 0.012
            head_col[:, line & (np.abs(u - cx) < a * 0.6)] *= 0.72
    nose = (np.abs(u - cx) < 0.02) & (v > cy - 0.01) & (v < cy + 0.06)
    head_col[:, nose] *= 0.85
    if p.ood_texture > 0:
        check = ((np.floor(u * size) + np.floor(v * size)) % 2).astype(bool)
        head_col[:, check] = np.clip(head_col[:, check] * (1 + p.ood_texture), 0, 1)
    hair_rgb = _rgb(hair_hsv)
    head_col[:, hair] = hair_rgb[:, None]
    layers.append(("head", layer(head_col, head | hair), cfg.plane_index("head")))

    ey = cy - 0.04
    eyes = np.zeros_like(head)
    for side in (-1, 1):
        eyes |= ((u - cx - side * p.eye_spacing) ** 2 + (v - ey) ** 2) <= 0.03**2
    layers.append(("eyes", layer(np.asarray(p.eye_rgb), eyes), cfg.plane_index("eyes")))

    my = cy + 0.15
    dx = (u - cx) / p.mouth_halfwidth
    centre_line = my + p.mouth_curve * (1.0 - dx**2)
    mouth = (np.abs(dx) <= 1.0) & (np.abs(v - centre_line) < 0.022)
    mouth_rgb = _rgb((0.98, 0.6, 0.62))
    layers.append(("mouth", layer(mouth_rgb, mouth), cfg.plane_index("mouth")))

    if p.glasses:
        hw, hh = p.lens_halfsize
        lenses = np.zeros_like(head)
        for side in (-1, 1):
            lenses |= (np.abs(u - cx - side * p.eye_spacing) <= hw) & (np.abs(v - ey) <= hh)
        bridge = (np.abs(u - cx) <= p.eye_spacing) & (np.abs(v - ey + hh * 0.4) <= 0.016)
        lens_rgb = _rgb(p.lens_hsv)
        layers.append(("glasses", layer(lens_rgb, lenses | bridge, p.lens_alpha), cfg.plane_index("glasses")))

    if p.hat:
        top = cy - b
        brim = (np.abs(u - cx) <= a * 1.15) & (v >= top - 0.01) & (v <= top + 0.045)
        crown = (np.abs(u - cx) <= a * 0.75) & (v >= top - 0.15) & (v < top)
        layers.append(("hat", layer(_rgb(p.hat_hsv), brim | crown), cfg.plane_index("hat")))
    return layers


def render_layers(
    layers: Sequence[tuple[str, np.ndarray, int]], cfg: DatasetConfig, cam: Camera
) -> tuple[np.ndarray, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Warp and composite named layers.

    Returns:
        ``(rgb (H, W, 3) float, visible weight per layer, warped alpha per layer)``.
    """
    depths = cfg.depths
    order = sorted(range(len(layers)), key=lambda i: (layers[i][2], -i))
    rgba = torch.as_tensor(np.stack([layers[i][1] for i in order]), dtype=torch.float64)
    ref = Camera.reference(cfg.image_size)
    layer_depths = depths[[layers[i][2] for i in order]]
    homs = torch.as_tensor(homography_stack([cam], layer_depths, ref)[0])
    warped = warp(rgba, homs)
    alphas = warped[:, 3]
    ones = torch.ones_like(alphas[:1])
    trans = torch.cumprod(torch.cat([ones, 1 - alphas]), dim=0)[:-1]
    weights = (alphas * trans).numpy()
    view = composite(warped[:, :3], alphas, torch.as_tensor(layer_depths))
    rgb = view.rgb.permute(1, 2, 0).numpy()
    names = [layers[i][0] for i in order]
    return (
        rgb,
        {name: weights[k] for k, name in enumerate(names)},
        {name: alphas[k].numpy() for k, name in enumerate(names)},
    )


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def render_face(p: FaceParams, cfg: DatasetConfig) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Draw one face at its pose. Returns ``(uint8 image, masks)``."""
    cam = Camera.orbit(p.yaw, p.pitch, cfg.pivot_depth, cfg.image_size)
    rgb, weights, alphas = render_layers(face_layers(p, cfg), cfg, cam)
    shape = (cfg.image_size, cfg.image_size)
    empty = np.zeros(shape, dtype=bool)
    masks = {part: alphas[part] > 0.5 for part in PARTS}
    masks["glasses"] = weights["glasses"] > 0.5 if p.glasses else empty.copy()
    masks["hat"] = weights["hat"] > 0.5 if p.hat else empty.copy()
    masks["aged"] = (weights["head"] > 0.5) if p.aged else empty.copy()
    if p.smile:
        m = masks["mouth"]
        masks["smile"] = _dilate(m, 1) & (alphas["head"] > 0.5) | m
    else:
        masks["smile"] = empty.copy()
    masks["background"] = weights["background"] > 0.5
    return to_uint8(rgb), masks


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= shift_image(mask, dy, dx)
    return out


@dataclass
class ProceduralDataset:
    """In-memory face set with exact attribute/part masks and known poses.

    ``images`` is ``(n, H, W, 3)`` uint8, ``masks[name]`` ``(n, H, W)`` bool,
    ``poses`` ``(n, 2)`` yaw/pitch in degrees.
    """

    images: np.ndarray
    attributes: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    poses: np.ndarray
    params: list[FaceParams]
    seed: int
    config: DatasetConfig = field(default_factory=DatasetConfig)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def image(self, i: int) -> np.ndarray:
        """Float image in [0, 1], ``(H, W, 3)``."""
        return self.images[i].astype(np.float64) / 255.0

    def mask(self, i: int, name: str) -> np.ndarray:
        return self.masks[name][i]

    def has(self, i: int, attribute: str) -> bool:
        return bool(self.attributes[attribute][i])

    def indices(self, attribute: str, present: bool = True) -> np.ndarray:
        return np.flatnonzero(self.attributes[attribute] == present)

    def save(self, root: str | Path) -> None:
        """Write PNG images, per-attribute PNG masks and ``manifest.json``."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for name in self.masks:
            (root / "masks" / name).mkdir(parents=True, exist_ok=True)
        for i in range(len(self)):
            Image.fromarray(self.images[i]).save(root / "images" / f"{i:05d}.png")
            for name, m in self.masks.items():
                Image.fromarray((m[i] * 255).astype(np.uint8)).save(root / "masks" / name / f"{i:05d}.png")
        manifest = {
            "seed": self.seed,
            "config": asdict(self.config),
            "count": len(self),
            "mask_names": sorted(self.masks),
            "items": [
                {
                    "file": f"images/{i:05d}.png",
                    "attributes": {a: bool(self.attributes[a][i]) for a in ATTRIBUTES},
                    "pose": {"yaw": float(self.poses[i, 0]), "pitch": float(self.poses[i, 1])},
                    "params": asdict(self.params[i]),
                }
                for i in range(len(self))
            ],
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, root: str | Path) -> "ProceduralDataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        items = manifest["items"]
        images = np.stack([np.asarray(Image.open(root / it["file"]).convert("RGB")) for it in items])
        masks = {
            name: np.stack(
                [np.asarray(Image.open(root / "masks" / name / f"{i:05d}.png")) > 127 for i in range(len(items))]
            )
            for name in manifest["mask_names"]
        }
        params = [_params_from_dict(it["params"]) for it in items]
        return cls(
            images=images,
            attributes={a: np.array([it["attributes"][a] for it in items]) for a in ATTRIBUTES},
            masks=masks,
            poses=np.array([[it["pose"]["yaw"], it["pose"]["pitch"]] for it in items]),
            params=params,
            seed=manifest["seed"],
            config=DatasetConfig(**manifest["config"]),
        )


def _params_from_dict(d: dict) -> FaceParams:
    return FaceParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _assemble(params: list[FaceParams], cfg: DatasetConfig, seed: int) -> ProceduralDataset:
    images, masks = [], {name: [] for name in (*ATTRIBUTES, *PARTS, "background")}
    for p in params:
        img, m = render_face(p, cfg)
        images.append(img)
        for name in masks:
            masks[name].append(m[name])
    size = cfg.image_size
    return ProceduralDataset(
        images=np.stack(images) if images else np.zeros((0, size, size, 3), np.uint8),
        attributes={a: np.array([getattr(p, a) for p in params], dtype=bool) for a in ATTRIBUTES},
        masks={k: np.stack(v) if v else np.zeros((0, size, size), bool) for k, v in masks.items()},
        poses=np.array([[p.yaw, p.pitch] for p in params]).reshape(-1, 2),
        params=params,
        seed=seed,
        config=cfg,
    )


def generate_dataset(n: int, config: DatasetConfig | None = None, seed: int = 0) -> ProceduralDataset:
    """Sample ``n`` faces with independent fair-coin attributes."""
    if n < 1:
        raise DataError(f"dataset size must be >= 1, got {n}")
    cfg = config or DatasetConfig()
    rng = np.random.default_rng(seed)
    params = [sample_face(rng, cfg) for _ in range(n)]
    return _assemble(params, cfg, seed)


def generate_ood_variants(n: int, config: DatasetConfig | None = None, seed: int = 0) -> np.ndarray:
    """Frontal faces pushed off the training distribution.

    Skin hues outside the sampled range and a checkerboard/stripe texture
    add high-frequency detail the generator never saw. Returns float
    ``(n, H, W, 3)`` images.
    """
    cfg = config or DatasetConfig()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        p = sample_face(rng, cfg, {"glasses": False, "hat": False})
        p = replace(
            p,
            skin_hsv=(rng.uniform(0.2, 0.9), rng.uniform(0.3, 0.7), rng.uniform(0.6, 0.95)),
            ood_texture=float(rng.uniform(0.25, 0.4)),
            yaw=0.0,
            pitch=0.0,
        )
        img, _ = render_face(p, cfg)
        out.append(img.astype(np.float64) / 255.0)
    return np.stack(out)


def cut_and_paste(source: np.ndarray, source_mask: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Copy ``source`` pixels where the mask is set onto ``target``."""
    source, target = np.asarray(source), np.asarray(target)
    mask = np.asarray(source_mask, dtype=bool)
    if source.shape != target.shape or mask.shape != source.shape[:2]:
        raise ShapeError(f"shapes differ: source {source.shape}, mask {mask.shape}, target {target.shape}")
    m = mask[..., None] if source.ndim == 3 else mask
    return np.where(m, source, target)


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill (no wrap-around)."""
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if h - abs(dy) > 0 and w - abs(dx) > 0:
        out[yd, xd] = img[ys, xs]
    return out


def _centroid(mask: np.ndarray) -> np.ndarray | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return np.array([ys.mean(), xs.mean()])


@dataclass
class PairSet:
    """K negative/positive pairs of one identity for one attribute."""

    attribute_name: str
    negatives: np.ndarray
    positives: np.ndarray
    masks: np.ndarray
    source_ids: list[str]

    def __len__(self) -> int:
        return int(self.negatives.shape[0])

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            negatives=self.negatives,
            positives=self.positives,
            masks=self.masks,
            attribute_name=np.array(self.attribute_name),
            source_ids=np.array(self.source_ids),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PairSet":
        with np.load(path) as z:
            return cls(
                attribute_name=str(z["attribute_name"]),
                negatives=z["negatives"],
                positives=z["positives"],
                masks=z["masks"],
                source_ids=[str(s) for s in z["source_ids"]],
            )


def aged_variant(p: FaceParams, cfg: DatasetConfig) -> np.ndarray:
    """The same identity and pose, re-drawn with the procedural ageing."""
    img, _ = render_face(replace(p, aged=True), cfg)
    return img


def build_pairs(
    attribute: str,
    k: int,
    dataset: "ProceduralDataset | ExternalDataset",
    max_k: int = 10,
    source_index: int | None = None,
    seed: int = 0,
    frontal: bool = True,
    multi_identity: bool = False,
) -> PairSet:
    """Paste ``k`` donors' attribute regions onto one negative identity.

    The negative identity ``S`` is ``source_index`` or the first suitable
    attribute-negative face (frontal-most if ``frontal``). Donors are drawn
    without replacement from attribute-positive faces using ``seed``. Each
    donor region is translated so the donor's anchor part centroid lands on
    ``S``'s. For ``aged`` the positive is ``S`` re-drawn aged and the mask is
    the set of changed pixels. With ``multi_identity`` every pair gets its
    own negative identity, taken in the same preference order.
    """
    if not 1 <= k <= max_k:
        raise DataError(f"pair count must be in [1, {max_k}], got {k}")
    if multi_identity and source_index is not None:
        raise DataError("source_index and multi_identity are mutually exclusive")
    if source_index is not None:
        sources = [int(source_index)] * k
    else:
        negatives = dataset.indices(attribute, present=False)
        if negatives.size == 0:
            raise DataError(f"no {attribute}-negative identity available")
        candidates = [int(i) for i in negatives]
        if frontal and hasattr(dataset, "poses") and len(dataset.poses):
            candidates = [int(i) for i in negatives[np.argsort(np.abs(dataset.poses[negatives]).sum(axis=1), kind="stable")]]
        if attribute != "aged" and hasattr(dataset, "params"):
            # avoid identities carrying another pasteable attribute at the same spot
            clean = [i for i in candidates if not any(dataset.has(i, a) for a in ("glasses", "hat"))]
            candidates = clean + [i for i in candidates if i not in set(clean)]
        if not multi_identity:
            sources = [candidates[0]] * k
        elif len(candidates) < k:
            raise DataError(f"need {k} {attribute}-negative identities, only {len(candidates)} available")
        else:
            sources = candidates[:k]

    if attribute == "aged":
        if not isinstance(dataset, ProceduralDataset):
            raise DataError("aged pairs need procedural re-rendering of the source identity")
        negs, poss, masks = [], [], []
        for src in sources:
            s_img = dataset.images[src]
            pos = aged_variant(dataset.params[src], dataset.config)
            negs.append(s_img)
            poss.append(pos)
            masks.append(np.any(pos != s_img, axis=-1))
        return PairSet(attribute, np.stack(negs), np.stack(poss), np.stack(masks), [f"aged:{s}" for s in sources])

    donors = dataset.indices(attribute, present=True)
    donors = donors[~np.isin(donors, sources)]
    if donors.size < k:
        raise DataError(f"need {k} {attribute}-positive donors, only {donors.size} available (short by {k - donors.size})")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(donors, size=k, replace=False)
    anchor = ANCHOR_PART.get(attribute)
    negs, poss, masks, ids = [], [], [], []
    for d, src in zip(chosen, sources):
        d = int(d)
        s_img = dataset.images[src]
        s_anchor = _centroid(dataset.mask(src, anchor)) if anchor else None
        d_img, d_mask = dataset.images[d], dataset.mask(d, attribute)
        d_anchor = _centroid(dataset.mask(d, anchor)) if anchor else None
        if s_anchor is not None and d_anchor is not None:
            dy, dx = np.rint(s_anchor - d_anchor).astype(int)
            d_img, d_mask = shift_image(d_img, int(dy), int(dx)), shift_image(d_mask, int(dy), int(dx))
        negs.append(s_img)
        poss.append(cut_and_paste(d_img, d_mask, s_img))
        masks.append(d_mask)
        ids.append(f"{attribute}:{d}->{src}")
    return PairSet(attribute, np.stack(negs), np.stack(poss), np.stack(masks), ids)


class ExternalDataset:
    """Lazily indexed CelebAMask-HQ-style folder of images and label masks.

    ``label_map`` maps attribute/part names to integer label codes (a single
    code or a list). A face "has" an attribute when its mask is non-empty.
    """

    def __init__(self, image_dir: str | Path, mask_dir: str | Path, label_map: Mapping[str, int | Sequence[int]]):
        self.image_dir, self.mask_dir = Path(image_dir), Path(mask_dir)
        if not self.image_dir.is_dir() or not self.mask_dir.is_dir():
            raise IngestionError(f"missing directory: {self.image_dir} or {self.mask_dir}")
        self.label_map = {k: [v] if isinstance(v, int) else list(v) for k, v in label_map.items()}
        self.files: list[tuple[Path, Path]] = []
        masks = {p.stem: p for p in sorted(self.mask_dir.iterdir()) if p.is_file()}
        for img in sorted(self.image_dir.iterdir()):
            if not img.is_file():
                continue
            if img.stem not in masks:
                log.warning("no mask for %s, skipping", img.name)
                continue
            self.files.append((img, masks[img.stem]))
        self._labels: dict[int, np.ndarray] = {}
        self._images: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.files)

    def _read(self, path: Path, mode: str) -> np.ndarray:
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert(mode))
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read {path}: {exc}") from exc

    def labels(self, i: int) -> np.ndarray:
        if i not in self._labels:
            self._labels[i] = self._read(self.files[i][1], "L")
        return self._labels[i]

    @property
    def images(self) -> "_LazyImages":
        return _LazyImages(self)

    def raw_image(self, i: int) -> np.ndarray:
        if i not in self._images:
            self._images[i] = self._read(self.files[i][0], "RGB")
        return self._images[i]

    def image(self, i: int) -> np.ndarray:
        return self.raw_image(i).astype(np.float64) / 255.0

    def mask(self, i: int, name: str) -> np.ndarray:
        return np.isin(self.labels(i), self.label_map.get(name, []))

    def has(self, i: int, attribute: str) -> bool:
        return bool(self.mask(i, attribute).any())

    def indices(self, attribute: str, present: bool = True) -> np.ndarray:
        return np.array([i for i in range(len(self)) if self.has(i, attribute) == present], dtype=int)


class _LazyImages:
    def __init__(self, ds: ExternalDataset):
        self.ds = ds

    def __len__(self) -> int:
        return len(self.ds)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.ds.raw_image(int(i))


def ingest_external(
    image_dir: str | Path, mask_dir: str | Path, attribute_label_map: Mapping[str, int | Sequence[int]] | str | Path
) -> ExternalDataset:
    """Index an external image/mask folder; the label map may be a JSON file path."""
    if isinstance(attribute_label_map, (str, Path)):
        attribute_label_map = json.loads(Path(attribute_label_map).read_text())
    return ExternalDataset(image_dir, mask_dir, attribute_label_map)
