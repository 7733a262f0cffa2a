import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tomoheight.tenio import TensorFormatError, read_tensor, sidecar_path, write_tensor


def test_identity_roundtrip_real64(tmp_path):
    arr = np.eye(2)
    path = tmp_path / "ident.ten"
    write_tensor(arr, path, name="ident")
    back, meta = read_tensor(path, with_meta=True)
    assert back.tobytes() == arr.tobytes()
    assert meta["shape"] == [2, 2]
    assert meta["dtype"] == "real64"
    # payload is 4 float64 = 32 bytes after the 12 + 2*8 byte header
    assert path.stat().st_size == 12 + 16 + 32


def test_empty_shape_roundtrip(tmp_path):
    arr = np.zeros((0,), dtype=np.float32)
    write_tensor(arr, tmp_path / "empty.ten")
    back = read_tensor(tmp_path / "empty.ten")
    assert back.shape == (0,)
    assert back.dtype == np.float32


def test_complex_interleaving(tmp_path):
    arr = np.array([1.0 - 1.0j], dtype=np.complex64)
    path = tmp_path / "c.ten"
    write_tensor(arr, path)
    payload = path.read_bytes()[12 + 8:]
    assert len(payload) == 8
    re, im = np.frombuffer(payload, dtype="<f4")
    assert re == 1.0 and im == -1.0


def test_random_real32_roundtrip_bitwise(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    write_tensor(arr, tmp_path / "r.ten")
    back = read_tensor(tmp_path / "r.ten")
    assert back.tobytes() == arr.tobytes()
    assert back.dtype == arr.dtype


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "x.ten"
    write_tensor(np.arange(6, dtype=np.int32), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TensorFormatError, match="payload"):
        read_tensor(path)


def test_sidecar_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "x.ten"
    write_tensor(np.arange(6, dtype=np.int32), path)
    sc = json.loads(sidecar_path(path).read_text())
    sc["shape"] = [7]
    sidecar_path(path).write_text(json.dumps(sc))
    with pytest.raises(TensorFormatError, match="sidecar shape"):
        read_tensor(path)


def test_missing_sidecar_rejected(tmp_path):
    path = tmp_path / "x.ten"
    write_tensor(np.arange(6, dtype=np.int32), path)
    sidecar_path(path).unlink()
    with pytest.raises(TensorFormatError, match="sidecar"):
        read_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.ten"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)


def test_nonfinite_rejected(tmp_path):
    with pytest.raises(TensorFormatError, match="non-finite"):
        write_tensor(np.array([np.nan]), tmp_path / "bad.ten")


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(TensorFormatError, match="unsupported"):
        write_tensor(np.array([1], dtype=np.int64), tmp_path / "bad.ten")


@settings(max_examples=25, deadline=None)
@given(
    shape=st.lists(st.integers(0, 5), min_size=1, max_size=3),
    dtype=st.sampled_from(["<f4", "<f8", "<c8", "<i4"]),
    seed=st.integers(0, 2**31),
)
def test_roundtrip_property(tmp_path_factory, shape, dtype, seed):
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape))
    if dtype == "<i4":
        arr = rng.integers(-1000, 1000, size=shape).astype(dtype)
    elif dtype == "<c8":
        arr = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(dtype)
    else:
        arr = rng.standard_normal(shape).astype(dtype)
    assert arr.size == n
    path = tmp_path_factory.mktemp("ten") / "a.ten"
    write_tensor(arr, path)
    back = read_tensor(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
