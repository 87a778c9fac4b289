import struct

import numpy as np
import pytest

from dpmae import checkpoint


def test_roundtrip_preserves_values_and_shapes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a/w": rng.standard_normal((3, 4)),
        "a/b": rng.standard_normal(4),
        "scalar": np.array(2.5),
        "f32": rng.standard_normal((2, 2)).astype(np.float32),
    }
    path = tmp_path / "t.tensors"
    checkpoint.save_tensors(path, tensors)
    loaded = checkpoint.load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_byte_layout_is_stable(tmp_path):
    # the documented layout is frozen; this test pins the exact bytes of a
    # miniature container
    path = tmp_path / "t.tensors"
    checkpoint.save_tensors(path, {"x": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:8] == b"TENSORS\0"
    version, count = struct.unpack_from("<II", raw, 8)
    assert (version, count) == (1, 1)
    nlen = struct.unpack_from("<H", raw, 16)[0]
    assert raw[18 : 18 + nlen] == b"x"
    code, ndim = struct.unpack_from("<BB", raw, 19)
    assert (code, ndim) == (1, 1)
    assert struct.unpack_from("<I", raw, 21)[0] == 2
    assert np.frombuffer(raw[25:], dtype="<f8").tolist() == [1.0, 2.0]


def test_records_sorted_by_name(tmp_path):
    path = tmp_path / "t.tensors"
    checkpoint.save_tensors(path, {"zz": np.zeros(1), "aa": np.ones(1)})
    raw = path.read_bytes()
    assert raw.find(b"aa") < raw.find(b"zz")


def test_deterministic_bytes(tmp_path):
    tensors = {"b": np.arange(3.0), "a": np.ones((2, 2))}
    checkpoint.save_tensors(tmp_path / "1", tensors)
    checkpoint.save_tensors(tmp_path / "2", dict(reversed(tensors.items())))
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOTATENSORFILE")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_tensors(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v9"
    path.write_bytes(b"TENSORS\0" + struct.pack("<II", 9, 0))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load_tensors(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "t.tensors"
    checkpoint.save_tensors(path, {"x": np.zeros(1)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.load_tensors(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.save_tensors(tmp_path / "t", {"x": np.zeros(2, dtype=np.int32)})
