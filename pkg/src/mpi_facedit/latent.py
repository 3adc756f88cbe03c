"""Latent spaces (Z, W, W+) and the algebra of edit directions.

Latents are plain ``numpy`` float64 arrays:

* a W latent is a vector of shape ``(latent_dim,)`` (a leading batch axis is
  tolerated by the edit functions),
* a W+ latent is a matrix of shape ``(t, latent_dim)``, one row per synthesis
  block.

Edits are applied to W *before* it is broadcast to W+, so every synthesis
block sees the same offset.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateAttributeError, ShapeError, ValidationError

SIGN_CONVENTION = "positive_adds_attribute"
DIRECTION_FORMAT = "mpi-facedit/editdir"
DIRECTION_VERSION = 1


def sample_z(n: int, latent_dim: int, seed: int) -> np.ndarray:
    """Draw ``n`` standard-normal Z latents from a seeded generator."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, latent_dim))


def broadcast(w: np.ndarray, t: int) -> np.ndarray:
    """Replicate a W latent once per synthesis block.

    Args:
        w: W latent of shape ``(latent_dim,)`` or ``(batch, latent_dim)``.
        t: number of synthesis blocks.

    Returns:
        Array of shape ``(t, latent_dim)`` (or ``(batch, t, latent_dim)``).
    """
    if int(t) != t or t < 1:
        raise ConfigError(f"block count must be a positive integer, got {t!r}")
    w = np.asarray(w)
    if w.ndim not in (1, 2):
        raise ShapeError(f"W latent must be 1-D or batched 2-D, got shape {w.shape}")
    return np.repeat(w[..., None, :], int(t), axis=-2)


def reduce_wplus(wp: np.ndarray) -> np.ndarray:
    """Collapse W+ to W by averaging over the block axis."""
    wp = np.asarray(wp, dtype=np.float64)
    if wp.ndim < 2:
        raise ShapeError(f"W+ latent must have a block axis, got shape {wp.shape}")
    return wp.mean(axis=-2)


@dataclass(frozen=True)
class EditDirection:
    """Unit latent-space direction for one attribute.

    ``+direction`` increases attribute presence. The vector is normalised on
    construction; ``singular_values`` keeps the spectrum of the difference
    matrix it was estimated from, for diagnostics.
    """

    direction: np.ndarray
    attribute_name: str
    sign_convention: str = SIGN_CONVENTION
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        d = np.array(self.direction, dtype=np.float64).reshape(-1)
        if d.size == 0 or not np.all(np.isfinite(d)):
            raise ValidationError("edit direction must be a finite, non-empty vector")
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise DegenerateAttributeError(f"zero edit direction for {self.attribute_name!r}")
        d = d / norm
        d.setflags(write=False)
        sv = np.array(self.singular_values, dtype=np.float64).reshape(-1)
        sv.setflags(write=False)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "singular_values", sv)

    @property
    def latent_dim(self) -> int:
        return int(self.direction.shape[0])

    def save(self, path: str | Path) -> None:
        save_direction(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "EditDirection":
        return load_direction(path)


def _check_dims(w: np.ndarray, d: EditDirection) -> None:
    if w.shape[-1] != d.latent_dim:
        raise ShapeError(
            f"latent has dimension {w.shape[-1]}, direction {d.attribute_name!r} has {d.latent_dim}"
        )


def apply_edit(w: np.ndarray, d: EditDirection, scale: float = 1.0) -> np.ndarray:
    """Return ``w + scale * d.direction`` as a new array."""
    w = np.asarray(w, dtype=np.float64)
    _check_dims(w, d)
    return w + float(scale) * d.direction


def compose_edits(w: np.ndarray, edits: Iterable[tuple[EditDirection, float]]) -> np.ndarray:
    """Add several scaled directions to ``w``. An empty list returns a copy of ``w``."""
    out = np.array(w, dtype=np.float64)
    edits = list(edits)
    for d, _ in edits:
        _check_dims(out, d)
    for d, scale in edits:
        out = out + float(scale) * d.direction
    return out


def apply_edit_per_row(
    wp: np.ndarray, d: EditDirection, scales: Sequence[float] | np.ndarray
) -> np.ndarray:
    """Edit each W+ row with its own scale (advanced path, not the default mechanism)."""
    wp = np.asarray(wp, dtype=np.float64)
    _check_dims(wp, d)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (wp.shape[-2],):
        raise ShapeError(f"need one scale per block ({wp.shape[-2]}), got {scales.shape}")
    return wp + scales[:, None] * d.direction


# -- file format -----------------------------------------------------------
#
# <header JSON, UTF-8, single line>\n<base64 of little-endian float32 vector>\n
#
# The header keys are written sorted. The loader re-normalises in float64, so
# the unit-norm invariant holds to machine precision despite float32 storage.


def save_direction(d: EditDirection, path: str | Path) -> None:
    header = {
        "attribute_name": d.attribute_name,
        "dtype": "<f4",
        "format": DIRECTION_FORMAT,
        "latent_dim": d.latent_dim,
        "sign_convention": d.sign_convention,
        "singular_values": [float(s) for s in d.singular_values],
        "version": DIRECTION_VERSION,
    }
    payload = base64.b64encode(d.direction.astype("<f4").tobytes()).decode("ascii")
    text = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n" + payload + "\n"
    Path(path).write_bytes(text.encode("utf-8"))


def load_direction(path: str | Path) -> EditDirection:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ValidationError(f"{path}: truncated edit-direction file")
    header = json.loads(lines[0])
    if header.get("format") != DIRECTION_FORMAT:
        raise ValidationError(f"{path}: not an edit-direction file")
    vec = np.frombuffer(base64.b64decode(lines[1]), dtype="<f4").astype(np.float64)
    if vec.shape[0] != header["latent_dim"]:
        raise ShapeError(f"{path}: header says {header['latent_dim']} dims, payload has {vec.shape[0]}")
    return EditDirection(
        direction=vec,
        attribute_name=header["attribute_name"],
        sign_convention=header["sign_convention"],
        singular_values=np.asarray(header["singular_values"], dtype=np.float64),
    )
