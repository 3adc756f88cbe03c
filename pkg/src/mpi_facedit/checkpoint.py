"""Named-array container used for generator and encoder checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"MPIFCKPT"
    offset 8   u32       container version (1)
    offset 12  u64       header length L in bytes
    offset 20  L bytes   UTF-8 JSON header
    ...        padding   zero bytes up to the next multiple of 8
    data       raw little-endian float32 arrays, back to back

The header is ``{"metadata": {...}, "arrays": [{"name", "shape", "offset",
"nbytes"}, ...]}`` with offsets relative to the start of the data section.
Arrays are stored in sorted name order, so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"MPIFCKPT"
VERSION = 1


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata, "arrays": entries}, sort_keys=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    pad = (-len(prefix)) % 8
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(prefix + b"\0" * pad)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    start = 20 + hlen + ((-(20 + hlen)) % 8)
    arrays = {}
    for e in header["arrays"]:
        buf = raw[start + e["offset"] : start + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header["metadata"]


def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, names: list[str]) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Adam moments as arrays keyed by parameter name, plus per-parameter step counts."""
    arrays, steps = {}, {}
    sd = opt.state_dict()
    for idx, name in enumerate(names):
        st = sd["state"].get(idx)
        if not st:
            continue
        arrays[f"{prefix}/{name}/exp_avg"] = st["exp_avg"].cpu().numpy()
        arrays[f"{prefix}/{name}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
        steps[name] = float(st["step"])
    return arrays, steps


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, names: list[str], arrays: Mapping[str, np.ndarray], steps: Mapping[str, float]) -> None:
    sd = opt.state_dict()
    for idx, name in enumerate(names):
        if name not in steps:
            continue
        sd["state"][idx] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}/{name}/exp_avg_sq"].copy()),
        }
    opt.load_state_dict(sd)


def params_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
