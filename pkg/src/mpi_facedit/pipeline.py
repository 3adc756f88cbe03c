"""Run configuration, workdir layout and the pipeline commands.

Workdir layout::

    dataset/                 PNG images, masks/<name>/, manifest.json
    checkpoints/generator.ckpt
    checkpoints/encoder.ckpt
    pairs/<attribute>.npz
    directions/<attribute>.editdir
    renders/<name>/          orbit frames, depth maps, contact.png
    inversion/<stem>/        inversion / PTI outputs
    eval/report.json, report.md
    ablation/<attribute>.{json,md,png}
    manifests/<command>.json provenance: config snapshot + input/output hashes
    .lock                    advisory lock held while a command runs

Every command is a function ``cmd_<name>(cfg, wd) -> (inputs, outputs)``
returning the paths it read and wrote. Commands only read artifacts
produced by earlier commands, and raise :class:`MissingArtifactError`
naming the producer when one is absent.
"""

from __future__ import annotations

import contextlib
import copy
import fcntl
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import numpy as np
import tomli
import torch

from . import __version__
from .checkpoint import file_hash
from .data import ATTRIBUTES, DatasetConfig, PairSet, ProceduralDataset, build_pairs, generate_dataset, generate_ood_variants
from .editing import ablate_k, estimate_direction
from .errors import ConfigError, MissingArtifactError
from .evaluation import (
    MetricReport,
    attribute_efficacy,
    kid_from_features,
    fid_from_features,
    image_features,
    view_consistency,
)
from .generator import GANTrainConfig, GeneratorCheckpoint, GeneratorConfig, map_latent, render_w, render_wplus, synthesize_mpi, train_gan
from .inversion import EncoderCheckpoint, EncoderConfig, InversionTrainingConfig, invert, pivotal_tune, reconstruction_l2, train_encoder
from .latent import EditDirection, broadcast, compose_edits, sample_z
from .plotting import contact_sheet, load_png, loss_curves, save_depth_png, save_frames, save_png
from .renderer import render_orbit

log = logging.getLogger(__name__)

ENV_WORKDIR = "MPI_FACEDIT_WORKDIR"

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "workdir": "", "log_level": "INFO"},
    "dataset": {
        "n": 4000,
        "image_size": 32,
        "n_planes": 16,
        "d_near": 1.0,
        "d_far": 2.0,
        "yaw_range": 20.0,
        "pitch_range": 8.0,
    },
    "generator": {
        "latent_dim": 64,
        "t": 6,
        "channels_per_block": [64, 64, 32, 32, 16, 16],
        "mapping_layers": 4,
        "disc_channels": [16, 32, 64],
    },
    "gan": {
        "steps": 4000,
        "batch_size": 32,
        "lr_g": 2e-3,
        "lr_d": 2.5e-3,
        "r1_gamma": 1.0,
        "r1_interval": 4,
        "ema_beta": 0.995,
        "log_every": 100,
    },
    "encoder": {
        "steps": 3000,
        "batch_size": 32,
        "lr": 1e-3,
        "lambda_lpips": 1.0,
        "lambda_recons": 1.0,
        "lambda_latent": 0.1,
        "channels": [32, 64, 128],
        "log_every": 100,
    },
    "pairs": {"attributes": ["glasses", "hat", "smile", "aged"], "k": 10, "max_k": 10, "multi_identity": False},
    "edit": {"attribute": "glasses", "scale": 1.0, "sequential": [], "orbit_views": 5, "yaw_range": 60.0, "n_samples": 4},
    "invert": {"image": "", "pti_steps": 30, "pti_lr": 3e-4},
    "eval": {"n_samples": 100, "n_fid": 500, "attributes": ["glasses", "hat", "smile", "aged"], "orbit_views": 5, "yaw_range": 60.0},
    "ablate": {"attribute": "glasses", "k_values": [1, 5, 10, 15], "n_eval": 50},
}

COMMANDS = ("dataset", "train-gan", "train-encoder", "pairs", "estimate", "edit-render", "invert", "pti", "eval", "ablate")


# -- configuration ------------------------------------------------------------------------


def _check_type(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomli.loads(f"v = {rhs}")["v"]
    except tomli.TOMLDecodeError:
        value = rhs
    return section, key, value


@dataclass
class RunConfig:
    """All module settings merged from defaults, the TOML file and overrides."""

    sections: dict[str, dict[str, Any]]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None = None, overrides: list[str] | None = None) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        items: list[tuple[str, str, Any]] = []
        for section, values in (data or {}).items():
            if not isinstance(values, Mapping):
                raise ConfigError(f"{section}: expected a table")
            items += [(section, k, v) for k, v in values.items()]
        items += [_parse_override(o) for o in overrides or []]
        for section, key, value in items:
            if section not in merged:
                raise ConfigError(f"unknown config section [{section}]")
            if key not in merged[section]:
                raise ConfigError(f"unknown config field {section}.{key}")
            merged[section][key] = _check_type(section, key, value, DEFAULTS[section][key])
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "RunConfig":
        data: dict = {}
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} does not exist")
            try:
                data = tomli.loads(p.read_text(encoding="utf-8"))
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{p}: {e}") from e
        return cls.from_mapping(data, overrides)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    def validate(self) -> None:
        # building the typed configs runs their own invariant checks
        self.dataset_config()
        self.generator_config()
        self.gan_config()
        self.inversion_config()
        if not 1 <= self["pairs"]["k"] <= self["pairs"]["max_k"]:
            raise ConfigError(f"pairs.k must be in [1, pairs.max_k={self['pairs']['max_k']}], got {self['pairs']['k']}")
        for a in self["pairs"]["attributes"] + self["eval"]["attributes"]:
            if a not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {a!r}; choose from {list(ATTRIBUTES)}")

    @property
    def seed(self) -> int:
        return int(self["run"]["seed"])

    @property
    def workdir(self) -> Path:
        wd = self["run"]["workdir"] or os.environ.get(ENV_WORKDIR, "")
        if not wd:
            raise ConfigError(f"no workdir: set run.workdir, --workdir or ${ENV_WORKDIR}")
        return Path(wd)

    def dataset_config(self) -> DatasetConfig:
        d = self["dataset"]
        return DatasetConfig(
            image_size=d["image_size"], n_planes=d["n_planes"], d_near=d["d_near"], d_far=d["d_far"],
            yaw_range=d["yaw_range"], pitch_range=d["pitch_range"],
        )

    def generator_config(self) -> GeneratorConfig:
        d, g = self["dataset"], self["generator"]
        return GeneratorConfig(
            latent_dim=g["latent_dim"], t=g["t"], image_size=d["image_size"], n_planes=d["n_planes"],
            d_near=d["d_near"], d_far=d["d_far"], channels_per_block=tuple(g["channels_per_block"]),
            seed=self.seed, mapping_layers=g["mapping_layers"], disc_channels=tuple(g["disc_channels"]),
        )

    def gan_config(self) -> GANTrainConfig:
        g = self["gan"]
        return GANTrainConfig(
            batch_size=g["batch_size"], lr_g=g["lr_g"], lr_d=g["lr_d"], r1_gamma=g["r1_gamma"],
            r1_interval=g["r1_interval"], ema_beta=g["ema_beta"], log_every=g["log_every"],
        )

    def inversion_config(self) -> InversionTrainingConfig:
        e = self["encoder"]
        return InversionTrainingConfig(
            lambda_lpips=e["lambda_lpips"], lambda_recons=e["lambda_recons"], lambda_latent=e["lambda_latent"],
            lr=e["lr"], steps=e["steps"], batch_size=e["batch_size"], seed=self.seed, log_every=e["log_every"],
        )

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)


# -- workdir ------------------------------------------------------------------------------


class Workdir:
    def __init__(self, root: Path):
        self.root = Path(root)

    dataset = property(lambda self: self.root / "dataset")
    generator = property(lambda self: self.root / "checkpoints" / "generator.ckpt")
    encoder = property(lambda self: self.root / "checkpoints" / "encoder.ckpt")

    def pairs(self, attribute: str) -> Path:
        return self.root / "pairs" / f"{attribute}.npz"

    def direction(self, attribute: str) -> Path:
        return self.root / "directions" / f"{attribute}.editdir"

    def manifest(self, command: str) -> Path:
        return self.root / "manifests" / f"{command}.json"

    def require(self, path: Path, producer: str) -> Path:
        exists = (path / "manifest.json").is_file() if path == self.dataset else path.is_file()
        if not exists:
            raise MissingArtifactError(f"missing {path.relative_to(self.root)}; run `mpi-facedit {producer}` first")
        return path


class LockBusyError(RuntimeError):
    pass


@contextlib.contextmanager
def workdir_lock(root: Path) -> Iterator[None]:
    """Hold an exclusive advisory lock on ``root/.lock`` for the block's duration."""
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "a+") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as e:
            raise LockBusyError(f"workdir {root} is locked by another command") from e
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            m = p / "manifest.json"
            if m.is_file():
                out[str(m)] = file_hash(m)
        elif p.is_file():
            out[str(p)] = file_hash(p)
    return out


def write_manifest(wd: Workdir, command: str, cfg: RunConfig, inputs, outputs) -> Path:
    rel = lambda d: {str(Path(k).relative_to(wd.root)): v for k, v in d.items()}  # noqa: E731
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": rel(_hashes(inputs)),
        "outputs": rel(_hashes(outputs)),
    }
    path = wd.manifest(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- commands -------------------------------------------------------------------------------


def _seed_all(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def cmd_dataset(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    ds = generate_dataset(cfg["dataset"]["n"], cfg.dataset_config(), seed=cfg.seed)
    ds.save(wd.dataset)
    return [], [wd.dataset]


def cmd_train_gan(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    ds = ProceduralDataset.load(wd.require(wd.dataset, "dataset"))
    ck = train_gan(
        ds.images, ds.poses, cfg.generator_config(), cfg["gan"]["steps"], cfg.gan_config(),
        on_log=lambda r: log.info("gan %s", r), dump_dir=wd.root / "debug",
    )
    ck.save(wd.generator)
    plot = wd.root / "checkpoints" / "gan_losses.png"
    loss_curves(ck.losses, ["loss_g", "loss_d"], plot, "GAN losses")
    return [wd.dataset], [wd.generator, plot]


def cmd_train_encoder(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    gck = GeneratorCheckpoint.load(wd.require(wd.generator, "train-gan"))
    G = gck.generator()
    ecfg = EncoderConfig.for_generator(G.cfg, cfg["encoder"]["channels"])
    eck = train_encoder(G, cfg.inversion_config(), ecfg, on_log=lambda r: log.info("encoder %s", r))
    eck.save(wd.encoder)
    plot = wd.root / "checkpoints" / "encoder_losses.png"
    loss_curves(eck.losses, ["total", "lpips", "recons", "latent"], plot, "inversion losses")
    return [wd.generator], [wd.encoder, plot]


def cmd_pairs(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    ds = ProceduralDataset.load(wd.require(wd.dataset, "dataset"))
    p = cfg["pairs"]
    outs = []
    for a in p["attributes"]:
        pairs = build_pairs(a, p["k"], ds, max_k=p["max_k"], seed=cfg.seed, multi_identity=p["multi_identity"])
        path = wd.pairs(a)
        path.parent.mkdir(parents=True, exist_ok=True)
        pairs.save(path)
        sheet = path.with_suffix(".png")
        contact_sheet(np.stack([pairs.negatives, pairs.positives], axis=1)[:10], sheet, col_labels=["negative", "positive"])
        outs += [path, sheet]
    return [wd.dataset], outs


def cmd_estimate(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    enc = EncoderCheckpoint.load(wd.require(wd.encoder, "train-encoder")).encoder()
    ins, outs = [wd.encoder], []
    for a in cfg["pairs"]["attributes"]:
        pairs = PairSet.load(wd.require(wd.pairs(a), "pairs"))
        d = estimate_direction(pairs, enc)
        path = wd.direction(a)
        path.parent.mkdir(parents=True, exist_ok=True)
        d.save(path)
        ins.append(wd.pairs(a))
        outs.append(path)
    return ins, outs


def _load_models(wd: Workdir):
    G = GeneratorCheckpoint.load(wd.require(wd.generator, "train-gan")).generator()
    return G


def _direction(wd: Workdir, attribute: str) -> EditDirection:
    return EditDirection.load(wd.require(wd.direction(attribute), "estimate"))


def cmd_edit_render(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    """Render orbits of edited samples and a column-per-edit contact sheet.

    With ``edit.sequential`` the columns are the base sample followed by
    each cumulative edit; otherwise base and the single ``edit.attribute``.
    """
    e = cfg["edit"]
    G = _load_models(wd)
    attrs = list(e["sequential"]) or [e["attribute"]]
    dirs = [_direction(wd, a) for a in attrs]
    w = map_latent(G, sample_z(e["n_samples"], G.cfg.latent_dim, cfg.seed))
    columns = [w] + [compose_edits(w, [(d, e["scale"]) for d in dirs[: i + 1]]) for i in range(len(dirs))]
    labels = ["base"] + ["+" + "+".join(attrs[: i + 1]) for i in range(len(dirs))]
    name = "_".join(attrs)
    out_dir = wd.root / "renders" / name
    grid = np.stack([render_w(G, c) for c in columns], axis=1)
    sheet = out_dir / "contact.png"
    contact_sheet(grid, sheet, col_labels=labels)
    outs = [sheet]
    for s in range(len(w)):
        mpi = synthesize_mpi(G, broadcast(columns[-1][s], G.cfg.t))
        views = render_orbit(mpi, e["orbit_views"], e["yaw_range"])
        frames = np.stack([v.rgb.permute(1, 2, 0).double().numpy() for v in views])
        outs += save_frames(frames, out_dir / f"sample_{s:02d}", "frame")
        for i, v in enumerate(views):
            p = out_dir / f"sample_{s:02d}" / f"depth_{i:03d}.png"
            save_depth_png(p, v.depth.double().numpy(), G.cfg.d_near, G.cfg.d_far)
            outs.append(p)
        orbit_sheet = out_dir / f"sample_{s:02d}" / "orbit.png"
        contact_sheet(frames[None], orbit_sheet)
        outs.append(orbit_sheet)
    return [wd.generator] + [wd.direction(a) for a in attrs], outs


def _input_images(cfg: RunConfig, G) -> tuple[np.ndarray, list[str]]:
    path = cfg["invert"]["image"]
    if path:
        p = Path(path)
        if not p.is_file():
            raise MissingArtifactError(f"input image {p} does not exist")
        return load_png(p)[None], [p.stem]
    x = generate_ood_variants(5, DatasetConfig(image_size=G.cfg.image_size, n_planes=G.cfg.n_planes), seed=cfg.seed)
    return x, [f"ood_{i}" for i in range(len(x))]


def cmd_invert(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    G = _load_models(wd)
    enc = EncoderCheckpoint.load(wd.require(wd.encoder, "train-encoder")).encoder()
    x, names = _input_images(cfg, G)
    wp = invert(x, enc)
    recon = render_wplus(G, wp)
    outs = []
    for i, n in enumerate(names):
        d = wd.root / "inversion" / n
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "wplus.npy", wp[i])
        save_png(d / "input.png", x[i])
        save_png(d / "inverted.png", recon[i])
        outs += [d / "wplus.npy", d / "inverted.png"]
    return [wd.generator, wd.encoder], outs


def cmd_pti(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    G = _load_models(wd)
    enc = EncoderCheckpoint.load(wd.require(wd.encoder, "train-encoder")).encoder()
    x, names = _input_images(cfg, G)
    rows, outs, report = [], [], {}
    for i, n in enumerate(names):
        tuned, pivot = pivotal_tune(x[i], enc, G, cfg["invert"]["pti_steps"], cfg["invert"]["pti_lr"])
        before = float(reconstruction_l2(x[i], G, pivot)[0])
        after = float(reconstruction_l2(x[i], tuned, pivot)[0])
        report[n] = {"direct_l2": before, "pti_l2": after}
        rows.append(np.stack([x[i], render_wplus(G, pivot[None])[0], render_wplus(tuned, pivot[None])[0]]))
    d = wd.root / "inversion"
    d.mkdir(parents=True, exist_ok=True)
    (d / "pti.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    contact_sheet(np.stack(rows), d / "pti.png", row_labels=names, col_labels=["input", "encoder", "PTI"])
    outs += [d / "pti.json", d / "pti.png"]
    return [wd.generator, wd.encoder], outs


def cmd_eval(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    ev = cfg["eval"]
    G = _load_models(wd)
    ds = ProceduralDataset.load(wd.require(wd.dataset, "dataset"))
    dirs = {a: _direction(wd, a) for a in ev["attributes"]}
    n_fid = min(ev["n_fid"], len(ds))
    real = ds.images[:n_fid].astype(np.float64) / 255.0
    fake = render_w(G, map_latent(G, sample_z(n_fid, G.cfg.latent_dim, cfg.seed + 1)))
    fr, ff = image_features(real), image_features(fake)
    efficacy, eds, css, consistency = {}, [], [], []
    for a, d in dirs.items():
        res = attribute_efficacy(d, ev["n_samples"], G, seed=cfg.seed)
        efficacy[a] = res.efficacy
        eds.append(res.ed.mean())
        css.append(res.cs.mean())
        for w in res.w[: min(10, res.n)]:
            vc = view_consistency(broadcast(w, G.cfg.t), d, ev["orbit_views"], G, ev["yaw_range"])
            consistency.append(vc.fires_in_all_views)
    report = MetricReport(
        fid=fid_from_features(fr, ff), kid=kid_from_features(fr, ff), ed=float(np.mean(eds)), cs=float(np.mean(css)),
        efficacy=efficacy, view_consistency=float(np.mean(consistency)) if consistency else float("nan"),
    )
    d = wd.root / "eval"
    d.mkdir(parents=True, exist_ok=True)
    report.save(d / "report.json")
    (d / "report.md").write_text(report.to_markdown())
    return [wd.generator, wd.dataset] + [wd.direction(a) for a in dirs], [d / "report.json", d / "report.md"]


def cmd_ablate(cfg: RunConfig, wd: Workdir) -> tuple[list, list]:
    ab = cfg["ablate"]
    G = _load_models(wd)
    enc = EncoderCheckpoint.load(wd.require(wd.encoder, "train-encoder")).encoder()
    ds = ProceduralDataset.load(wd.require(wd.dataset, "dataset"))
    rep = ablate_k(ab["attribute"], ab["k_values"], ds, enc, G, n_eval=ab["n_eval"], seed=cfg.seed, pair_seed=cfg.seed)
    d = wd.root / "ablation"
    d.mkdir(parents=True, exist_ok=True)
    stem = d / ab["attribute"]
    rep.to_json(stem.with_suffix(".json"))
    stem.with_suffix(".md").write_text(rep.to_markdown())
    grid = np.stack([rep.samples[k] for k in ab["k_values"]])
    contact_sheet(grid, stem.with_suffix(".png"), row_labels=[f"K={k}" for k in ab["k_values"]])
    return [wd.dataset, wd.encoder, wd.generator], [stem.with_suffix(s) for s in (".json", ".md", ".png")]


HANDLERS: dict[str, Callable[[RunConfig, Workdir], tuple[list, list]]] = {
    "dataset": cmd_dataset,
    "train-gan": cmd_train_gan,
    "train-encoder": cmd_train_encoder,
    "pairs": cmd_pairs,
    "estimate": cmd_estimate,
    "edit-render": cmd_edit_render,
    "invert": cmd_invert,
    "pti": cmd_pti,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def run_command(command: str, cfg: RunConfig) -> list[Path]:
    """Run one command under the workdir lock and write its manifest."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    wd = Workdir(cfg.workdir)
    with workdir_lock(wd.root):
        _seed_all(cfg.seed)
        inputs, outputs = HANDLERS[command](cfg, wd)
        write_manifest(wd, command, cfg, inputs, outputs)
    return [Path(o) for o in outputs]
