import json
import struct

import numpy as np
import pytest

from compemb.checkpoint import (
    CheckpointError,
    ShapeMismatch,
    UnknownTensor,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from compemb.model import init_params
from compemb.tensor import Tensor

from conftest import tiny_model_config


def test_round_trip_is_byte_identical(tmp_path, tiny):
    p = init_params(tiny, 0)
    path = tmp_path / "a.ckpt"
    save_checkpoint(p, path, tiny, {"step": 7})
    q, meta = load_checkpoint(path, tiny)
    assert meta["step"] == 7 and meta["model_config"]["n_comp_tokens"] == tiny.n_comp_tokens
    assert set(q) == set(p)
    for k in p:
        assert q[k].dtype == p[k].dtype
        np.testing.assert_array_equal(q[k].data, p[k].data)
    save_checkpoint(q, tmp_path / "b.ckpt", tiny, {"step": 7})
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_header_layout():
    buf = to_bytes({"w": Tensor(np.arange(3, dtype=np.float32))}, {"x": 1})
    (n,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8 : 8 + n])
    assert header == {"__metadata__": {"x": 1}, "w": {"dtype": "F32", "offsets": [0, 12], "shape": [3]}}
    assert buf[8 + n :] == np.arange(3, dtype="<f4").tobytes()


def test_float64_survives():
    arr = np.random.default_rng(0).normal(size=(2, 3))
    q, _ = from_bytes(to_bytes({"w": Tensor(arr, dtype=np.float64)}))
    assert q["w"].dtype == np.float64
    np.testing.assert_array_equal(q["w"].data, arr)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b[:5], "missing header length"),
        (lambda b: struct.pack("<Q", 10**9) + b[8:], "exceeds file size"),
        (lambda b: b[:8] + b"\xff" + b[9:], "unparseable header"),
        (lambda b: b[:-4], "truncated or inconsistent"),
    ],
)
def test_corrupt_files_raise(mutate, message):
    buf = to_bytes({"w": Tensor(np.ones((2, 2), dtype=np.float32))})
    with pytest.raises(CheckpointError, match=message):
        from_bytes(mutate(buf))


def test_compression_count_mismatch(tmp_path):
    k16, k32 = tiny_model_config(n_comp_tokens=16), tiny_model_config(n_comp_tokens=32)
    save_checkpoint(init_params(k16, 0), tmp_path / "k16.ckpt", k16)
    with pytest.raises(ShapeMismatch, match="comp_emb"):
        load_checkpoint(tmp_path / "k16.ckpt", k32)


def test_unknown_tensor(tmp_path, tiny):
    p = init_params(tiny, 0)
    p["extra"] = Tensor(np.zeros(2))
    save_checkpoint(p, tmp_path / "x.ckpt")
    with pytest.raises(UnknownTensor):
        load_checkpoint(tmp_path / "x.ckpt", tiny)
