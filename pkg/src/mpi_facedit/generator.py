"""Small StyleGAN-style MPI generator and its pose-conditioned discriminator.

The generator maps ``z`` to ``w`` with an MLP, broadcasts ``w`` to W+ and runs
``t`` modulated-convolution blocks (two per resolution). Colour and
per-plane alpha heads sit on the last block and are modulated by the same
W+ row as that block. The result is a
multi-plane image with one shared colour image and ``n_planes`` alpha maps.
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
from .latent import sample_z
from .renderer import Camera, MultiPlaneImage, default_focal, homography_stack, plane_depths, render_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 64
    t: int = 6
    image_size: int = 32
    n_planes: int = 16
    d_near: float = 1.0
    d_far: float = 2.0
    channels_per_block: tuple[int, ...] = (64, 64, 64, 64, 32, 32)
    seed: int = 0
    mapping_layers: int = 4
    disc_channels: tuple[int, ...] = (32, 64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))
        if self.t < 2 or self.t % 2:
            raise ConfigError(f"block count t must be even and >= 2, got {self.t}")
        if len(self.channels_per_block) != self.t:
            raise ConfigError(f"need {self.t} channel entries, got {len(self.channels_per_block)}")
        if self.image_size < 4 or self.image_size & (self.image_size - 1):
            raise ConfigError(f"image_size must be a power of two, got {self.image_size}")
        base = self.image_size / 2 ** (self.t // 2 - 1)
        if base < 4 or base != int(base):
            raise ConfigError(f"image_size {self.image_size} inconsistent with t={self.t}")
        if self.n_planes < 2:
            raise ConfigError("n_planes must be >= 2")
        if not 0 < self.d_near < self.d_far:
            raise ConfigError("need 0 < d_near < d_far")

    @property
    def base_size(self) -> int:
        return self.image_size // 2 ** (self.t // 2 - 1)

    @property
    def depths(self) -> np.ndarray:
        return plane_depths(self.n_planes, self.d_near, self.d_far)

    @property
    def focal(self) -> float:
        return default_focal(self.image_size)

    @property
    def pivot_depth(self) -> float:
        return float(self.depths[self.n_planes // 2])

    @classmethod
    def tiny(cls, **kw) -> "GeneratorConfig":
        """8x8, two blocks: the instance used for gradient checks."""
        base = dict(latent_dim=8, t=2, image_size=8, n_planes=4, channels_per_block=(8, 8), disc_channels=(8,), mapping_layers=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_block"] = list(self.channels_per_block)
        d["disc_channels"] = list(self.disc_channels)
        return d


# -- layers ------------------------------------------------------------------


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalised learning rate)."""

    def __init__(self, in_dim: int, out_dim: int, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, k: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, k, k))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * k * k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.weight.shape[-1] // 2)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class ModulatedConv(nn.Module):
    """Conv whose input channels are scaled per sample by an affine map of a style."""

    def __init__(self, in_ch: int, out_ch: int, k: int, style_dim: int, demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, k, k))
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * k * k)
        self.demodulate = demodulate
        self.k = k

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        # scale activations instead of weights: avoids grouped convs, which are slow on CPU
        s = self.affine(style)
        weight = self.weight * self.scale
        out = F.conv2d(x * s[:, :, None, None], weight, padding=self.k // 2)
        if self.demodulate:
            dcoef = torch.rsqrt((weight[None] * s[:, None, :, None, None]).pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            out = out * dcoef[:, :, None, None]
        return out


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(EqualLinear(latent_dim, latent_dim, lr_mul=0.01) for _ in range(n_layers))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.channels_per_block
        self.const = nn.Parameter(torch.randn(1, ch[0], cfg.base_size, cfg.base_size))
        self.convs = nn.ModuleList()
        self.biases = nn.ParameterList()
        for i in range(cfg.t):
            in_ch = ch[0] if i == 0 else ch[i - 1]
            self.convs.append(ModulatedConv(in_ch, ch[i], 3, cfg.latent_dim))
            self.biases.append(nn.Parameter(torch.zeros(1, ch[i], 1, 1)))
        # colour and alpha heads share the last block's row
        self.to_rgb = ModulatedConv(ch[-1], 3, 1, cfg.latent_dim, demodulate=False)
        self.to_alpha = ModulatedConv(ch[-1], cfg.n_planes, 1, cfg.latent_dim, demodulate=False)
        # start with the far plane opaque and the rest transparent
        bias = torch.full((1, cfg.n_planes, 1, 1), -3.0)
        bias[:, -1] = 3.0
        self.plane_bias = nn.Parameter(bias)
        self.t = cfg.t

    def forward(self, wp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.const.expand(wp.shape[0], -1, -1, -1)
        for i in range(self.t):
            if i > 0 and i % 2 == 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = lrelu(self.convs[i](x, wp[:, i]) + self.biases[i])
        last = wp[:, -1]
        return torch.sigmoid(self.to_rgb(x, last)), torch.sigmoid(self.to_alpha(x, last) + self.plane_bias)


class Generator(nn.Module):
    """Mapping network + synthesis network emitting an MPI."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.synthesis = SynthesisNetwork(cfg)
        self.register_buffer("depths", torch.as_tensor(cfg.depths, dtype=torch.float32))
        # unit of the exposed W space; trained generators use latent_unit()
        self.w_scale = 1.0

    def map(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"z has length {z.shape[-1]}, expected {self.cfg.latent_dim}")
        if not torch.isfinite(z).all():
            raise ValidationError("z contains non-finite values")
        w = self.mapping(z)
        return w if self.w_scale == 1.0 else w / self.w_scale

    def broadcast(self, w: torch.Tensor) -> torch.Tensor:
        return w.unsqueeze(1).expand(-1, self.cfg.t, -1)

    def synthesize(self, wp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, t, D)`` W+ -> colour ``(B, 3, H, W)`` and alphas ``(B, N, H, W)``."""
        if wp.dim() != 3 or wp.shape[1] != self.cfg.t or wp.shape[2] != self.cfg.latent_dim:
            raise ShapeError(f"W+ must be (B, {self.cfg.t}, {self.cfg.latent_dim}), got {tuple(wp.shape)}")
        return self.synthesis(wp if self.w_scale == 1.0 else wp * self.w_scale)

    def mpi(self, wp: torch.Tensor) -> MultiPlaneImage:
        color, alphas = self.synthesize(wp)
        return MultiPlaneImage(color, alphas, self.cfg.depths, self.cfg.focal)

    def render(self, wp: torch.Tensor, homographies: torch.Tensor | None = None) -> torch.Tensor:
        """Render ``(B, 3, H, W)`` images; no homographies means the reference camera."""
        color, alphas = self.synthesize(wp)
        if homographies is None:
            homographies = torch.eye(3, dtype=color.dtype).expand(wp.shape[0], self.cfg.n_planes, 3, 3)
        return render_batch(color, alphas, self.cfg.depths, homographies).rgb

    def homographies(self, poses_deg: np.ndarray) -> torch.Tensor:
        """``(B, N, 3, 3)`` homographies for yaw/pitch pairs in degrees."""
        cams = [Camera.orbit(float(y), float(p), self.cfg.pivot_depth, self.cfg.image_size) for y, p in poses_deg]
        ref = Camera.reference(self.cfg.image_size)
        return torch.as_tensor(homography_stack(cams, self.cfg.depths, ref), dtype=torch.float32)


class MinibatchStd(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        g = min(4, b)
        while b % g:
            g -= 1
        y = x.reshape(g, -1, *x.shape[1:])
        std = (y.var(dim=0, unbiased=False) + 1e-8).sqrt().mean(dim=(1, 2, 3))
        std = std.reshape(-1, 1, 1, 1).repeat(g, 1, *x.shape[2:])
        return torch.cat([x, std], dim=1)


class Discriminator(nn.Module):
    """Image discriminator with camera yaw/pitch appended to its final feature vector."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.disc_channels
        self.from_rgb = EqualConv(3, ch[0], 1)
        self.blocks = nn.ModuleList()
        size = cfg.image_size
        prev = ch[0]
        for c in ch:
            self.blocks.append(nn.ModuleList([EqualConv(prev, c, 3), EqualConv(c, c, 3)]))
            prev = c
            size //= 2
        self.mbstd = MinibatchStd()
        self.final_conv = EqualConv(prev + 1, prev, 3)
        self.fc = EqualLinear(prev * size * size, 64)
        self.pose_fc = EqualLinear(64 + 2, 64)
        self.out = EqualLinear(64, 1)

    def forward(self, img: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        """``img`` in [0, 1], ``pose`` ``(B, 2)`` yaw/pitch in radians."""
        x = lrelu(self.from_rgb(img * 2.0 - 1.0))
        for c1, c2 in self.blocks:
            x = lrelu(c2(lrelu(c1(x))))
            x = F.avg_pool2d(x, 2)
        x = lrelu(self.final_conv(self.mbstd(x)))
        x = lrelu(self.fc(x.flatten(1)))
        x = lrelu(self.pose_fc(torch.cat([x, pose.to(x)], dim=1)))
        return self.out(x).squeeze(1)


# -- checkpoint ----------------------------------------------------------------


@dataclass(frozen=True)
class GANTrainConfig:
    batch_size: int = 32
    lr_g: float = 2e-3
    lr_d: float = 2.5e-3
    betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 1.0
    r1_interval: int = 4
    ema_beta: float = 0.995
    log_every: int = 100


@dataclass
class GeneratorCheckpoint:
    """Trained GAN state: generator, EMA generator, discriminator, optimiser moments."""

    config: GeneratorConfig
    step: int
    arrays: dict[str, np.ndarray]
    losses: list[dict] = field(default_factory=list)
    opt_steps: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    w_scale: float = 1.0

    def generator(self, ema: bool = True) -> Generator:
        """A frozen generator in eval mode (EMA weights by default), W in calibrated units."""
        g = Generator(self.config)
        ckpt.load_module("G_ema" if ema else "G", g, self.arrays)
        g.w_scale = self.w_scale
        g.eval().requires_grad_(False)
        return g

    def discriminator(self) -> Discriminator:
        d = Discriminator(self.config)
        ckpt.load_module("D", d, self.arrays)
        return d.eval().requires_grad_(False)

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "generator",
            "config": self.config.to_dict(),
            "step": self.step,
            "opt_steps": self.opt_steps,
            "train_config": self.train_config,
            "losses": self.losses,
            "w_scale": self.w_scale,
        }
        ckpt.save_arrays(path, self.arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorCheckpoint":
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("kind") != "generator":
            raise ValidationError(f"{path}: not a generator checkpoint")
        return cls(
            config=GeneratorConfig(**meta["config"]),
            step=int(meta["step"]),
            arrays=arrays,
            losses=meta.get("losses", []),
            opt_steps=meta.get("opt_steps", {}),
            train_config=meta.get("train_config", {}),
            w_scale=float(meta.get("w_scale", 1.0)),
        )


def generator_loss(G: Generator, D: Discriminator, wp: torch.Tensor, homs: torch.Tensor, pose_rad: torch.Tensor) -> torch.Tensor:
    """Non-saturating logistic generator loss on rendered fakes."""
    fake = G.render(wp, homs)
    return F.softplus(-D(fake, pose_rad)).mean()


def _param_names(m: nn.Module) -> list[str]:
    return [n for n, _ in m.named_parameters()]


def train_gan(
    images: np.ndarray,
    poses_deg: np.ndarray,
    config: GeneratorConfig,
    steps: int,
    train_config: GANTrainConfig | None = None,
    resume: GeneratorCheckpoint | None = None,
    on_log: Callable[[dict], None] | None = None,
    dump_dir: str | Path | None = None,
) -> GeneratorCheckpoint:
    """Adversarially train the MPI generator.

    Args:
        images: real images ``(n, H, W, 3)``, uint8 or float in [0, 1].
        poses_deg: ``(n, 2)`` yaw/pitch of each real image; fakes are rendered
            at poses resampled from this set.
        config: generator configuration (seed included).
        steps: number of additional optimisation steps.
        resume: continue from this checkpoint instead of a fresh init.
        on_log: called with each logged loss record.
        dump_dir: where to write the last batch if a loss goes non-finite.

    Every step draws its randomness from a generator seeded by
    ``(config.seed, step)``, so resuming reproduces an uninterrupted run.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if len(images) == 0:
        raise ConfigError("empty training set")
    tc = train_config or GANTrainConfig()
    imgs = torch.as_tensor(np.asarray(images))
    imgs = imgs.float() / 255.0 if imgs.dtype == torch.uint8 else imgs.float()
    imgs = imgs.permute(0, 3, 1, 2).contiguous()
    if imgs.shape[-1] != config.image_size:
        raise ShapeError(f"images are {imgs.shape[-1]}px, config says {config.image_size}")
    poses = np.asarray(poses_deg, dtype=np.float64)
    pose_rad = torch.as_tensor(np.radians(poses), dtype=torch.float32)

    torch.manual_seed(config.seed)
    G, D = Generator(config), Discriminator(config)
    G_ema = copy.deepcopy(G).requires_grad_(False)
    opt_g = torch.optim.Adam(G.parameters(), lr=tc.lr_g, betas=tc.betas, eps=1e-8)
    opt_d = torch.optim.Adam(D.parameters(), lr=tc.lr_d, betas=tc.betas, eps=1e-8)
    start, losses = 0, []
    if resume is not None:
        ckpt.load_module("G", G, resume.arrays)
        ckpt.load_module("G_ema", G_ema, resume.arrays)
        ckpt.load_module("D", D, resume.arrays)
        ckpt.load_optimizer("optG", opt_g, _param_names(G), resume.arrays, resume.opt_steps.get("G", {}))
        ckpt.load_optimizer("optD", opt_d, _param_names(D), resume.arrays, resume.opt_steps.get("D", {}))
        start, losses = resume.step, list(resume.losses)

    homs_all = G.homographies(poses)
    n = imgs.shape[0]
    for step in range(start, start + steps):
        rng = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        real_idx = torch.randint(n, (tc.batch_size,), generator=rng)
        fake_idx = torch.randint(n, (tc.batch_size,), generator=rng)
        z = torch.randn(tc.batch_size, config.latent_dim, generator=rng)
        real, real_pose = imgs[real_idx], pose_rad[real_idx]
        homs, fake_pose = homs_all[fake_idx], pose_rad[fake_idx]

        # discriminator
        G.requires_grad_(False)
        D.requires_grad_(True)
        with torch.no_grad():
            fake = G.render(G.broadcast(G.map(z)), homs)
        loss_d = F.softplus(D(fake, fake_pose)).mean() + F.softplus(-D(real, real_pose)).mean()
        r1 = torch.zeros(())
        if step % tc.r1_interval == 0:
            real_req = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(D(real_req, real_pose).sum(), real_req, create_graph=True)
            r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
            loss_d = loss_d + 0.5 * tc.r1_gamma * tc.r1_interval * r1
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        # generator
        G.requires_grad_(True)
        D.requires_grad_(False)
        loss_g = generator_loss(G, D, G.broadcast(G.map(z)), homs, fake_pose)
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        with torch.no_grad():
            for pe, p in zip(G_ema.parameters(), G.parameters()):
                pe.lerp_(p, 1.0 - tc.ema_beta)

        rec = {"step": step + 1, "loss_g": loss_g.item(), "loss_d": loss_d.item(), "r1": r1.item()}
        if not (math.isfinite(rec["loss_g"]) and math.isfinite(rec["loss_d"])):
            _dump_batch(dump_dir, step, real, fake, z)
            raise TrainingError(f"non-finite GAN loss at step {step + 1}: {rec}")
        losses.append(rec)
        if on_log and ((step + 1) % tc.log_every == 0 or step == start):
            on_log(rec)

    arrays = {**ckpt.module_arrays("G", G), **ckpt.module_arrays("G_ema", G_ema), **ckpt.module_arrays("D", D)}
    a_g, s_g = ckpt.optimizer_arrays("optG", opt_g, _param_names(G))
    a_d, s_d = ckpt.optimizer_arrays("optD", opt_d, _param_names(D))
    arrays.update(a_g)
    arrays.update(a_d)
    tc_dict = asdict(tc)
    tc_dict["betas"] = list(tc.betas)
    return GeneratorCheckpoint(config, start + steps, arrays, losses, {"G": s_g, "D": s_d}, tc_dict, latent_unit(G_ema))


# Fraction of the latent radius that one W unit spans. Picked on a development
# sweep of edit scales: smaller units under-edit, larger ones leak into identity.
W_UNIT_FRACTION = 0.85


def latent_radius(G: Generator, n: int = 10000, seed: int = 2024) -> float:
    """Mean distance of raw mapping outputs from their mean, over ``n`` fixed draws."""
    z = torch.as_tensor(sample_z(n, G.cfg.latent_dim, seed), dtype=torch.float32)
    with torch.no_grad():
        w = G.mapping(z).double()
    return float((w - w.mean(0)).norm(dim=1).mean())


def latent_unit(G: Generator) -> float:
    """Unit of the exposed W space: ``W_UNIT_FRACTION`` of the latent radius.

    A unit-norm edit at scale 1 then moves a latent by a fixed share of the
    latent cloud's size, whatever the network's internal scale.
    """
    return W_UNIT_FRACTION * latent_radius(G)


def _dump_batch(dump_dir, step, real, fake, z) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nan_step{step + 1}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, real=real.numpy(), fake=fake.numpy(), z=z.numpy())
    log.error("non-finite loss; last batch written to %s", path)


# -- convenience wrappers on numpy latents ------------------------------------


def map_latent(G: Generator, z: np.ndarray) -> np.ndarray:
    """Z -> W for one latent or a batch, as float64 numpy."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    with torch.no_grad():
        w = G.map(torch.as_tensor(np.atleast_2d(z), dtype=torch.float32))
    w = w.double().numpy()
    return w[0] if single else w


def synthesize_mpi(G: Generator, wp: np.ndarray) -> MultiPlaneImage:
    """W+ ``(t, D)`` or ``(B, t, D)`` -> MPI, without gradients."""
    wp = np.asarray(wp)
    single = wp.ndim == 2
    with torch.no_grad():
        mpi = G.mpi(torch.as_tensor(wp[None] if single else wp, dtype=torch.float32))
    if single:
        mpi = MultiPlaneImage(mpi.color[0], mpi.alphas[0], mpi.depths, mpi.focal)
    return mpi


def render_w(G: Generator, w: np.ndarray, poses_deg: np.ndarray | None = None, batch: int = 64) -> np.ndarray:
    """Render W latents ``(B, D)`` to float images ``(B, H, W, 3)``."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    out = []
    with torch.no_grad():
        for s in range(0, w.shape[0], batch):
            wb = torch.as_tensor(w[s : s + batch], dtype=torch.float32)
            homs = None if poses_deg is None else G.homographies(np.asarray(poses_deg)[s : s + batch])
            out.append(G.render(G.broadcast(wb), homs).permute(0, 2, 3, 1).double().numpy())
    return np.concatenate(out)


def render_wplus(G: Generator, wp: np.ndarray, batch: int = 64) -> np.ndarray:
    """Render W+ latents ``(B, t, D)`` at the reference camera to ``(B, H, W, 3)``."""
    wp = np.asarray(wp, dtype=np.float64)
    out = []
    with torch.no_grad():
        for s in range(0, wp.shape[0], batch):
            out.append(G.render(torch.as_tensor(wp[s : s + batch], dtype=torch.float32)).permute(0, 2, 3, 1).double().numpy())
    return np.concatenate(out)
