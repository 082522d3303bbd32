import numpy as np
import pytest

from dgdehaze.checkpoint import (CheckpointError, load_checkpoint,
                                 params_checksum, save_checkpoint)


def arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "conv.weight": rng.normal(0, 1, (4, 3, 3, 3)).astype(np.float32),
        "conv.bias": rng.normal(0, 1, 4).astype(np.float32),
        "steps": np.array(17, dtype=np.int64),
    }


def test_round_trip(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, arrays(), meta={"kind": "test", "lr": 1e-3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "test", "lr": 1e-3}
    for k, v in arrays().items():
        assert loaded[k].dtype == v.dtype
        assert np.array_equal(loaded[k], v)


def test_byte_identical_for_same_content(tmp_path):
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, arrays(), meta={"x": 1})
    save_checkpoint(p2, arrays(), meta={"x": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), arrays())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"{}\nnope")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_params_checksum_sensitivity():
    a = arrays()
    base = params_checksum(a)
    assert params_checksum(arrays()) == base
    mutated = arrays()
    mutated["conv.bias"] = mutated["conv.bias"] + 1e-6
    assert params_checksum(mutated) != base
