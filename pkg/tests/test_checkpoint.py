import numpy as np
import pytest

from slmrec.checkpoint import load_checkpoint, save_checkpoint
from slmrec.errors import CheckpointError


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta.0.w": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "gamma": rng.normal(size=(5,)).astype(np.float32),
    }
    config = {"layers": 2, "hidden": 16, "note": "hello world"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, tensors)
    got_cfg, got = load_checkpoint(path)
    assert got_cfg == {"layers": "2", "hidden": "16", "note": "hello world"}
    assert list(got) == list(tensors)
    for name in tensors:
        np.testing.assert_array_equal(got[name], tensors[name])


def test_payload_is_little_endian_f32(tmp_path):
    arr = np.array([1.0, -2.5], dtype=np.float64)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {}, {"x": arr})
    blob = path.read_bytes()
    payload = blob.split(b"end\n", 1)[1]
    np.testing.assert_array_equal(np.frombuffer(payload, dtype="<f4"),
                                  arr.astype("<f4"))


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, {}, {"x": np.ones(4, dtype=np.float32)})
    blob = p.read_bytes()
    p.write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(p)


def test_missing_file():
    with pytest.raises(CheckpointError):
        load_checkpoint("/does/not/exist.ckpt")
