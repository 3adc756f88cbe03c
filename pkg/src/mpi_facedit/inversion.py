"""Image-to-W+ inversion: perceptual loss, encoder training and pivotal tuning.

The encoder is trained on images rendered by a frozen generator at the
reference camera, so every training image comes with the W+ latent that
produced it. Out-of-distribution images are handled afterwards by briefly
fine-tuning a copy of the generator around the encoder's estimate (the pivot).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .generator import Generator, GeneratorCheckpoint, GeneratorConfig

log = logging.getLogger(__name__)


# -- perceptual distance ---------------------------------------------------------


class PerceptualFeatureExtractor(nn.Module):
    """Fixed random conv stack used as a perceptual feature space.

    Layer ``l`` is a 3x3 conv + leaky ReLU; layers after the first are
    preceded by 2x average pooling. Weights are drawn once from ``seed`` and
    never trained. ``v`` holds the per-layer channel weights (all ones by
    default).
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 32), seed: int = 0, in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        prev = in_channels
        for c in channels:
            conv = nn.Conv2d(prev, c, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (prev * 9)))
                conv.bias.copy_(torch.randn(c, generator=gen) * 0.1)
            self.convs.append(conv)
            prev = c
        self.v = nn.ParameterList(nn.Parameter(torch.ones(c), requires_grad=False) for c in channels)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Channel-normalised feature maps, one per layer."""
        feats = []
        h = x * 2.0 - 1.0
        for i, conv in enumerate(self.convs):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h / (h.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10))
        return feats


_DEFAULT_EXTRACTOR: dict[tuple, PerceptualFeatureExtractor] = {}


def default_extractor() -> PerceptualFeatureExtractor:
    key = ("default",)
    if key not in _DEFAULT_EXTRACTOR:
        _DEFAULT_EXTRACTOR[key] = PerceptualFeatureExtractor()
    return _DEFAULT_EXTRACTOR[key]


def perceptual_loss(
    x: torch.Tensor, y: torch.Tensor, extractor: PerceptualFeatureExtractor | None = None
) -> torch.Tensor:
    """Per-sample perceptual distance between image batches ``(B, 3, H, W)``.

    For each layer the squared, ``v``-weighted difference of the normalised
    features is summed over channels and averaged over positions; layers
    are summed. Returns a ``(B,)`` tensor.
    """
    if x.shape != y.shape:
        raise ShapeError(f"perceptual_loss inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    ext = extractor if extractor is not None else default_extractor()
    ext = ext.to(x.dtype)
    total = x.new_zeros(x.shape[0])
    for v, fx, fy in zip(ext.v, ext(x), ext(y)):
        diff = (v[None, :, None, None] * (fx - fy)).pow(2).sum(dim=1)
        total = total + diff.mean(dim=(1, 2))
    return total


# -- encoder -----------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    t: int = 6
    latent_dim: int = 64
    channels: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.image_size // 2 ** len(self.channels) < 1:
            raise ConfigError(f"{len(self.channels)} stride-2 layers is too many for {self.image_size}px input")

    @classmethod
    def for_generator(cls, g: GeneratorConfig, channels: Sequence[int] | None = None) -> "EncoderConfig":
        if channels is None:
            channels = (32, 64, 128) if g.image_size >= 32 else (8,)
        return cls(image_size=g.image_size, t=g.t, latent_dim=g.latent_dim, channels=tuple(channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class Encoder(nn.Module):
    """Strided conv stack with a linear head that emits the W+ matrix directly."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        prev = 3
        for c in cfg.channels:
            layers += [nn.Conv2d(prev, c, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(c, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = c
        self.features = nn.Sequential(*layers)
        side = cfg.image_size // 2 ** len(cfg.channels)
        self.head = nn.Linear(prev * side * side, cfg.t * cfg.latent_dim)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()

    def init_mean(self, w_mean: torch.Tensor) -> None:
        """Start every output row at the average W so training begins at the mean face."""
        with torch.no_grad():
            self.head.bias.copy_(w_mean.reshape(-1).repeat(self.cfg.t).to(self.head.bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> ``(B, t, latent_dim)``."""
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] != self.cfg.image_size or x.shape[-2] != self.cfg.image_size:
            raise ShapeError(f"encoder expects (B, 3, {self.cfg.image_size}, {self.cfg.image_size}), got {tuple(x.shape)}")
        h = self.features(x * 2.0 - 1.0).flatten(1)
        return self.head(h).reshape(-1, self.cfg.t, self.cfg.latent_dim)


# -- loss and training ------------------------------------------------------------


@dataclass(frozen=True)
class InversionTrainingConfig:
    lambda_lpips: float = 1.0
    lambda_recons: float = 1.0
    lambda_latent: float = 0.1
    lr: float = 1e-3
    steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        lams = (self.lambda_lpips, self.lambda_recons, self.lambda_latent)
        if min(lams) < 0 or max(lams) <= 0:
            raise ConfigError(f"loss weights must be non-negative with at least one positive, got {lams}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")


def inversion_loss(
    x: torch.Tensor,
    w_target: torch.Tensor,
    encoder: Encoder,
    generator: Generator,
    config: InversionTrainingConfig | None = None,
    extractor: PerceptualFeatureExtractor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of perceptual, pixel and latent terms.

    ``recons`` and ``latent`` are un-squared Euclidean norms taken per sample
    (the latent norm over the whole ``t x latent_dim`` matrix); every term is
    averaged over the batch. The generator renders at the reference camera.
    """
    cfg = config or InversionTrainingConfig()
    wp = encoder(x)
    recon = generator.render(wp)
    terms = {
        "lpips": perceptual_loss(x, recon, extractor).mean(),
        "recons": (x - recon).flatten(1).norm(dim=1).mean(),
        "latent": (w_target - wp).flatten(1).norm(dim=1).mean(),
    }
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite inversion loss term {name!r}")
    total = cfg.lambda_lpips * terms["lpips"] + cfg.lambda_recons * terms["recons"] + cfg.lambda_latent * terms["latent"]
    return total, {k: v.item() for k, v in terms.items()}


def mean_w(generator: Generator, n: int = 4096, seed: int = 0) -> torch.Tensor:
    z = torch.randn(n, generator.cfg.latent_dim, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        return generator.map(z).mean(dim=0)


@dataclass
class EncoderCheckpoint:
    config: EncoderConfig
    train_config: InversionTrainingConfig
    step: int
    arrays: dict[str, np.ndarray]
    losses: list[dict] = field(default_factory=list)
    generator_hash: str = ""

    def encoder(self) -> Encoder:
        enc = Encoder(self.config)
        ckpt.load_module("E", enc, self.arrays)
        return enc.eval().requires_grad_(False)

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "encoder",
            "config": self.config.to_dict(),
            "train_config": asdict(self.train_config),
            "step": self.step,
            "losses": self.losses,
            "generator_hash": self.generator_hash,
        }
        ckpt.save_arrays(path, self.arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "EncoderCheckpoint":
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("kind") != "encoder":
            raise ValidationError(f"{path}: not an encoder checkpoint")
        return cls(
            config=EncoderConfig(**meta["config"]),
            train_config=InversionTrainingConfig(**meta["train_config"]),
            step=int(meta["step"]),
            arrays=arrays,
            losses=meta.get("losses", []),
            generator_hash=meta.get("generator_hash", ""),
        )


def train_encoder(
    generator: Generator | GeneratorCheckpoint,
    config: InversionTrainingConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    on_log: Callable[[dict], None] | None = None,
    extractor: PerceptualFeatureExtractor | None = None,
) -> EncoderCheckpoint:
    """Train an encoder against a frozen generator on its own renders.

    Each step samples ``z ~ N(0, I)`` from a generator seeded by
    ``(seed, step)``, renders ``x = G(broadcast(map(z)))`` at the reference
    camera and minimises :func:`inversion_loss` with ``w_target`` the
    broadcast mapping output.

    Raises:
        TrainingError: a loss term became non-finite, or the generator's
            parameters changed during training.
    """
    cfg = config or InversionTrainingConfig()
    G = generator.generator() if isinstance(generator, GeneratorCheckpoint) else generator
    G.eval().requires_grad_(False)
    before = ckpt.params_hash(G)
    ecfg = encoder_config or EncoderConfig.for_generator(G.cfg)
    if (ecfg.t, ecfg.latent_dim, ecfg.image_size) != (G.cfg.t, G.cfg.latent_dim, G.cfg.image_size):
        raise ConfigError("encoder and generator disagree on t, latent_dim or image_size")

    torch.manual_seed(cfg.seed)
    enc = Encoder(ecfg)
    enc.init_mean(mean_w(G, seed=cfg.seed))
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr, betas=(0.9, 0.99))
    losses = []
    for step in range(cfg.steps):
        rng = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
        z = torch.randn(cfg.batch_size, G.cfg.latent_dim, generator=rng)
        with torch.no_grad():
            wp = G.broadcast(G.map(z))
            x = G.render(wp)
        total, terms = inversion_loss(x, wp, enc, G, cfg, extractor)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        rec = {"step": step + 1, "total": total.item(), **terms}
        losses.append(rec)
        if on_log and ((step + 1) % cfg.log_every == 0 or step == 0):
            on_log(rec)

    if ckpt.params_hash(G) != before:
        raise TrainingError("generator parameters changed during encoder training")
    enc.eval().requires_grad_(False)
    return EncoderCheckpoint(ecfg, cfg, cfg.steps, ckpt.module_arrays("E", enc), losses, before)


# -- inference ------------------------------------------------------------------------


def to_tensor(images: np.ndarray, image_size: int | None = None) -> torch.Tensor:
    """``(H, W, 3)`` or ``(B, H, W, 3)`` uint8/float images -> ``(B, 3, H, W)`` float32."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) or (B, H, W, 3) images, got {arr.shape}")
    if image_size is not None and arr.shape[1:3] != (image_size, image_size):
        raise ShapeError(f"expected {image_size}x{image_size} images, got {arr.shape[1]}x{arr.shape[2]}")
    x = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def invert(x: np.ndarray, encoder: Encoder, batch: int = 256) -> np.ndarray:
    """Encode images to W+ latents as float64 (``(t, D)`` for one image)."""
    single = np.asarray(x).ndim == 3
    xt = to_tensor(x, encoder.cfg.image_size)
    with torch.no_grad():
        out = torch.cat([encoder(xt[s : s + batch]) for s in range(0, xt.shape[0], batch)])
    wp = out.double().numpy()
    return wp[0] if single else wp


def pivotal_tune(
    x: np.ndarray,
    encoder: Encoder,
    generator: Generator,
    steps: int = 30,
    lr: float = 3e-4,
    lambda_lpips: float = 1.0,
    extractor: PerceptualFeatureExtractor | None = None,
) -> tuple[Generator, np.ndarray]:
    """Fine-tune a copy of ``generator`` so the encoder's pivot reproduces ``x``.

    The pivot is fixed; the copy is optimised on pixel MSE plus weighted
    perceptual loss at the reference camera. The input generator is left
    untouched.

    Raises:
        ConfigError: ``steps < 1``.
        TrainingError: the loss rises above 10x its starting value.
    """
    if steps < 1:
        raise ConfigError(f"PTI needs at least one step, got {steps}")
    pivot = invert(x, encoder)
    xt = to_tensor(x, generator.cfg.image_size)
    wp = torch.as_tensor(pivot[None] if pivot.ndim == 2 else pivot, dtype=torch.float32)
    G = copy.deepcopy(generator).train().requires_grad_(True)
    opt = torch.optim.Adam(G.parameters(), lr=lr)
    start = None
    for step in range(steps):
        recon = G.render(wp)
        loss = F.mse_loss(recon, xt) + lambda_lpips * perceptual_loss(xt, recon, extractor).mean()
        value = loss.item()
        if start is None:
            start = value
        elif not math.isfinite(value) or value > 10.0 * start:
            raise TrainingError(f"PTI diverged at step {step}: loss {value:.4g} vs start {start:.4g}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return G.eval().requires_grad_(False), pivot


def reconstruction_l2(x: np.ndarray, generator: Generator, wp: np.ndarray) -> np.ndarray:
    """Per-image Euclidean distance between ``x`` and the reference render of ``wp``."""
    xt = to_tensor(x, generator.cfg.image_size)
    wpt = torch.as_tensor(wp[None] if np.asarray(wp).ndim == 2 else wp, dtype=torch.float32)
    with torch.no_grad():
        recon = generator.render(wpt)
    return (xt - recon).flatten(1).norm(dim=1).double().numpy()
