"""Edit-direction estimation from inverted positive/negative pairs.

Each pair is inverted to W+, collapsed to W by averaging the block rows, and
the positive-minus-negative differences are stacked into a ``(K, D)``
matrix. The edit direction is its top right-singular vector, oriented so it
points from the negatives towards the positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PairSet, build_pairs
from .errors import DataError, DegenerateAttributeError, ShapeError, ValidationError
from .inversion import Encoder, invert
from .latent import EditDirection, reduce_wplus


def difference_matrix(pairs: PairSet, encoder: Encoder) -> np.ndarray:
    """``(K, D)`` matrix of W-space differences, positive minus negative."""
    if len(pairs) < 1:
        raise DataError("need at least one pair")
    pos = reduce_wplus(invert(pairs.positives, encoder))
    neg = reduce_wplus(invert(pairs.negatives, encoder))
    return pos - neg


def direction_from_differences(diff: np.ndarray, attribute: str) -> EditDirection:
    """Top right-singular vector of ``diff``, signed towards the mean difference.

    If the mean difference is orthogonal to the singular vector the SVD's own
    sign is kept.

    Raises:
        DegenerateAttributeError: every difference is zero.
    """
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim != 2 or diff.shape[0] < 1:
        raise ShapeError(f"difference matrix must be (K >= 1, D), got {diff.shape}")
    if not np.all(np.isfinite(diff)):
        raise ValidationError("difference matrix contains non-finite values")
    if not np.any(diff):
        raise DegenerateAttributeError(f"positives and negatives invert identically for {attribute!r}")
    _, s, vt = np.linalg.svd(diff, full_matrices=False)
    v = vt[0]
    if v @ diff.mean(axis=0) < 0:
        v = -v
    return EditDirection(v, attribute, singular_values=s)


def estimate_direction(pairs: PairSet, encoder: Encoder) -> EditDirection:
    return direction_from_differences(difference_matrix(pairs, encoder), pairs.attribute_name)


def per_row_directions(pairs: PairSet, encoder: Encoder) -> list[EditDirection]:
    """One direction per W+ row, for the per-row editing path."""
    diff = invert(pairs.positives, encoder) - invert(pairs.negatives, encoder)
    return [direction_from_differences(diff[:, r], pairs.attribute_name) for r in range(diff.shape[1])]


@dataclass
class AblationRow:
    k: int
    efficacy: float
    mean_cs: float
    n_negatives: int


@dataclass
class AblationReport:
    attribute: str
    rows: list[AblationRow]
    directions: dict[int, EditDirection] = field(default_factory=dict)
    samples: dict[int, np.ndarray] = field(default_factory=dict)

    def efficacy(self, k: int) -> float:
        return next(r.efficacy for r in self.rows if r.k == k)

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "rows": [vars(r) for r in self.rows]}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_markdown(self) -> str:
        lines = [f"| K | efficacy ({self.attribute}) | mean CS |", "|---|---|---|"]
        lines += [f"| {r.k} | {r.efficacy:.2f} | {r.mean_cs:.3f} |" for r in self.rows]
        return "\n".join(lines) + "\n"


def ablate_k(
    attribute: str,
    k_values: Sequence[int],
    dataset,
    encoder: Encoder,
    generator,
    n_eval: int = 50,
    seed: int = 0,
    pair_seed: int = 0,
    source_index: int | None = None,
) -> AblationReport:
    """Estimate a direction for each K and score it on held-out samples.

    Pairs for every K are prefixes of one draw of ``max(k_values)`` donors,
    so larger K only adds pairs. All K share the same evaluation latents.
    """
    from .evaluation import attribute_efficacy

    if not k_values:
        raise ValidationError("k_values is empty")
    kmax = max(k_values)
    full = build_pairs(attribute, kmax, dataset, max_k=kmax, source_index=source_index, seed=pair_seed)
    diff = difference_matrix(full, encoder)
    rows, dirs, samples = [], {}, {}
    for k in k_values:
        d = direction_from_differences(diff[:k], attribute)
        res = attribute_efficacy(d, n_eval, generator, seed=seed)
        rows.append(AblationRow(int(k), res.efficacy, res.mean_cs, res.n))
        dirs[int(k)] = d
        samples[int(k)] = res.edited[:4]
    return AblationReport(attribute, rows, dirs, samples)
