import json
import struct

import numpy as np
import pytest
import torch

from mpi_facedit import checkpoint as ckpt
from mpi_facedit.errors import ValidationError


def test_container_layout_by_hand(tmp_path):
    arrays = {"b": np.arange(3, dtype=np.float32), "a": np.ones((2, 2), dtype=np.float64)}
    ckpt.save_arrays(tmp_path / "c", arrays, {"kind": "x"})
    raw = (tmp_path / "c").read_bytes()
    assert raw[:8] == b"MPIFCKPT"
    version, hlen = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    header = json.loads(raw[20 : 20 + hlen])
    assert header["metadata"] == {"kind": "x"}
    assert [e["name"] for e in header["arrays"]] == ["a", "b"]
    start = 20 + hlen
    start += (-start) % 8
    assert start % 8 == 0 and set(raw[20 + hlen : start]) <= {0}
    a = header["arrays"][0]
    assert raw[start : start + a["nbytes"]] == struct.pack("<4f", 1, 1, 1, 1)
    b = header["arrays"][1]
    assert raw[start + b["offset"] :] == struct.pack("<3f", 0, 1, 2)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {f"m/{i}": rng.standard_normal((3, i + 1)).astype(np.float32) for i in range(4)}
    ckpt.save_arrays(tmp_path / "c", arrays, {"step": 3})
    back, meta = ckpt.load_arrays(tmp_path / "c")
    assert meta == {"step": 3}
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes()


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(ValidationError):
        ckpt.load_arrays(tmp_path / "x")
    (tmp_path / "y").write_bytes(b"MPIFCKPT" + struct.pack("<IQ", 9, 2) + b"{}")
    with pytest.raises(ValidationError, match="version"):
        ckpt.load_arrays(tmp_path / "y")


def test_module_and_optimizer_roundtrip():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 1))
    opt = torch.optim.Adam(net.parameters(), lr=0.1)
    for _ in range(2):
        opt.zero_grad()
        net(torch.randn(5, 3)).sum().backward()
        opt.step()
    names = [n for n, _ in net.named_parameters()]
    arrays = ckpt.module_arrays("N", net)
    o_arrays, steps = ckpt.optimizer_arrays("O", opt, names)
    assert steps == {n: 2.0 for n in names}
    net2 = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 1))
    ckpt.load_module("N", net2, arrays)
    opt2 = torch.optim.Adam(net2.parameters(), lr=0.1)
    ckpt.load_optimizer("O", opt2, names, o_arrays, steps)
    assert ckpt.params_hash(net) == ckpt.params_hash(net2)
    x = torch.randn(5, 3)
    for o, n in ((opt, net), (opt2, net2)):
        o.zero_grad()
        n(x).sum().backward()
        o.step()
    assert ckpt.params_hash(net) == ckpt.params_hash(net2)


def test_params_hash_sensitive():
    net = torch.nn.Linear(2, 2)
    h = ckpt.params_hash(net)
    with torch.no_grad():
        net.weight[0, 0] += 1e-6
    assert ckpt.params_hash(net) != h
