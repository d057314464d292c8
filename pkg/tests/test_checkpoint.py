import struct

import numpy as np
import pytest

from ansguard.checkpoint import FORMAT_VERSION, read_container, read_header, write_container
from ansguard.errors import (
    CheckpointError,
    TruncatedCheckpointError,
    VersionMismatchError,
)


@pytest.fixture
def container(tmp_path):
    path = tmp_path / "sub" / "thing.ckpt"
    arrays = [
        ("a", np.arange(6, dtype=np.float32).reshape(2, 3)),
        ("b", np.array([1, -2], dtype=np.int64)),
        ("c", np.zeros((0, 4), dtype=np.float64)),
    ]
    write_container(path, {"artifact": "test", "note": "x"}, arrays)
    return path, arrays


def test_container_restores_arrays_and_header(container):
    path, arrays = container
    header, loaded = read_container(path)
    assert header["artifact"] == "test"
    assert header["format_version"] == FORMAT_VERSION
    assert list(loaded) == ["a", "b", "c"]
    for name, arr in arrays:
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)


def test_header_read_skips_payload(container):
    path, _ = container
    path.write_bytes(path.read_bytes()[:-8])
    assert read_header(path)["note"] == "x"
    with pytest.raises(TruncatedCheckpointError):
        read_container(path)


def test_version_mismatch(container):
    path, _ = container
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError) as err:
        read_header(path)
    assert err.value.exit_code == 5


def test_bad_magic_and_trailing_bytes(container):
    path, _ = container
    raw = path.read_bytes()
    path.write_bytes(raw + b"\x00\x00")
    with pytest.raises(CheckpointError):
        read_container(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_header(path)


def test_too_short_for_prefix(tmp_path):
    path = tmp_path / "stub.ckpt"
    path.write_bytes(b"AN")
    with pytest.raises(TruncatedCheckpointError):
        read_container(path)
