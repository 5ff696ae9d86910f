import struct

import numpy as np
import pytest

from casd.errors import FormatError
from casd.tnsr import dumps_tensor, load_tensor, loads_tensor, save_tensor


def test_exact_byte_layout():
    blob = dumps_tensor(np.array([1.5, -2.0], dtype=np.float32))
    want = b"TNSR1" + struct.pack("<I", 1) + struct.pack("<I", 2) + struct.pack("<2f", 1.5, -2.0)
    assert blob == want


def test_round_trip_ranks():
    rng = np.random.default_rng(4)
    for shape in ((), (5,), (3, 4), (2, 3, 4), (2, 1, 3, 2)):
        a = rng.normal(size=shape).astype(np.float32)
        b = loads_tensor(dumps_tensor(a))
        assert b.shape == a.shape
        assert b.dtype == np.float32
        np.testing.assert_array_equal(a, b)


def test_file_round_trip(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "x.tnsr"
    save_tensor(path, a)
    np.testing.assert_array_equal(load_tensor(path), a)


def test_bad_magic_rejected():
    with pytest.raises(FormatError):
        loads_tensor(b"NOPE1" + b"\x00" * 8)


def test_truncated_payload_rejected():
    blob = dumps_tensor(np.ones(4, dtype=np.float32))
    with pytest.raises(FormatError):
        loads_tensor(blob[:-2])
    with pytest.raises(FormatError):
        loads_tensor(blob + b"\x00")


def test_excessive_rank_rejected():
    blob = b"TNSR1" + struct.pack("<I", 9) + struct.pack("<9I", *([1] * 9))
    with pytest.raises(FormatError):
        loads_tensor(blob)


def test_truncated_header_rejected():
    with pytest.raises(FormatError):
        loads_tensor(b"TNSR1\x02")
