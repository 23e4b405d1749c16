import io

import numpy as np
import pytest

from isoscan import checkpoint as ckpt
from isoscan.network import ModelConfig, ReconNet


def _ck():
    rng = np.random.default_rng(0)
    return ckpt.Checkpoint({"kind": "test", "step": 7},
                           {"param/a": rng.standard_normal((2, 3)).astype(np.float32),
                            "param/scalar": np.float32(2.5).reshape(()),
                            "adam.m/a": np.zeros((2, 3), np.float32)})


def test_roundtrip_bitwise(tmp_path):
    ck = _ck()
    raw = ckpt.to_bytes(ck)
    path = tmp_path / "x.vemc"
    ckpt.save(ck, path)
    back = ckpt.load(path)
    assert ckpt.to_bytes(back) == raw
    assert back.meta == ck.meta
    for k, v in ck.blobs.items():
        assert back.blobs[k].shape == v.shape
        np.testing.assert_array_equal(back.blobs[k], v)


def test_layout_header():
    raw = ckpt.to_bytes(_ck())
    assert raw[:4] == b"VEMC"
    assert int.from_bytes(raw[4:8], "little") == 1


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncated(cut):
    raw = ckpt.to_bytes(_ck())
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(raw[:cut])


def test_bad_magic_and_trailing():
    raw = ckpt.to_bytes(_ck())
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(raw + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load(tmp_path / "nope.vemc")


def test_store_roundtrip_and_mismatch():
    cfg = ModelConfig(channels=4, n_groups=1, n_blocks=1, embed_dim=4)
    a = ReconNet(cfg, np.float32)
    ck = ckpt.from_bytes(ckpt.to_bytes(ckpt.Checkpoint({}, ckpt.store_blobs(a.store))))
    b = ReconNet(ModelConfig(**{**cfg.to_dict(), "seed": 1}), np.float32)
    ckpt.load_store(b.store, ck)
    assert a.store.checksum() == b.store.checksum()
    wrong = ReconNet(ModelConfig(channels=6, n_groups=1, n_blocks=1, embed_dim=4), np.float32)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_store(wrong.store, ck)


def test_file_object(tmp_path):
    buf = io.BytesIO()
    ckpt.save(_ck(), buf)
    buf.seek(0)
    assert ckpt.load(buf).meta["step"] == 7
