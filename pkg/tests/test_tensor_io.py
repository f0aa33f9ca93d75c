import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqcompress.tensor_io import (
    BadMagicError,
    HeaderError,
    TensorArchive,
    TensorEntry,
    TrailingDataError,
    TruncatedError,
    VersionError,
    archive_to_bytes,
    read_archive,
    total_scalars,
    write_archive,
)
from conftest import random_archive


def _write(archive):
    buf = io.BytesIO()
    n = write_archive(archive, buf)
    assert n == len(buf.getvalue())
    return buf.getvalue()


def test_empty_archive_has_no_payload():
    blob = _write(TensorArchive())
    assert blob[:4] == b"AQT0" and blob[4] == 1
    (hlen,) = struct.unpack_from("<I", blob, 5)
    assert len(blob) == 9 + hlen
    assert read_archive(blob) == TensorArchive()


def test_single_tensor_layout():
    a = TensorArchive.from_arrays([("w", np.array([[1, 2], [3, 4]], np.float32))])
    blob = _write(a)
    (hlen,) = struct.unpack_from("<I", blob, 5)
    payload = blob[9 + hlen :]
    assert len(payload) == 16
    assert np.frombuffer(payload, "<f4").tolist() == [1, 2, 3, 4]
    assert b'"offset":0' in blob[9 : 9 + hlen]


def test_random_roundtrip_bit_exact(rng):
    a = random_archive(rng, 10)
    b = read_archive(_write(a))
    assert a == b
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()


def test_roundtrip_preserves_nan_and_negative_zero():
    data = np.array([np.nan, -0.0, np.inf, 1e-45], np.float32)
    a = TensorArchive.from_arrays([("odd", data)])
    assert read_archive(_write(a))["odd"].data.tobytes() == data.tobytes()


def test_write_is_deterministic(rng):
    a = random_archive(rng, 5)
    assert _write(a) == _write(a)


def test_path_roundtrip(tmp_path, rng):
    a = random_archive(rng, 3)
    write_archive(a, tmp_path / "x.aqt")
    assert read_archive(tmp_path / "x.aqt") == a


def test_bad_magic():
    blob = b"XXXX" + _write(TensorArchive())[4:]
    with pytest.raises(BadMagicError):
        read_archive(blob)


def test_version_mismatch():
    blob = bytearray(_write(TensorArchive()))
    blob[4] = 2
    with pytest.raises(VersionError):
        read_archive(bytes(blob))


def test_truncated_payload(rng):
    blob = _write(random_archive(rng, 3))
    with pytest.raises(TruncatedError):
        read_archive(blob[:-1])


def test_truncated_header():
    blob = _write(TensorArchive.from_arrays([("w", np.ones(3))]))
    with pytest.raises(TruncatedError):
        read_archive(blob[:12])


def test_trailing_garbage(rng):
    with pytest.raises(TrailingDataError):
        read_archive(_write(random_archive(rng, 2)) + b"\0")


def test_inconsistent_header_length():
    a = TensorArchive.from_arrays([("w", np.ones(4))])
    blob = archive_to_bytes(a).replace(b'"nbytes":16', b'"nbytes":12')
    blob = blob[:5] + struct.pack("<I", struct.unpack_from("<I", blob, 5)[0]) + blob[9:]
    with pytest.raises(HeaderError):
        read_archive(blob)


def test_non_float32_dtype_rejected():
    a = TensorArchive.from_arrays([("w", np.ones(2))])
    blob = archive_to_bytes(a)
    hlen = struct.unpack_from("<I", blob, 5)[0]
    header = blob[9 : 9 + hlen].replace(b'"nbytes":8', b'"nbytes":8,"dtype":"float16"')
    blob = blob[:5] + struct.pack("<I", len(header)) + header + blob[9 + hlen :]
    with pytest.raises(HeaderError, match="dtype"):
        read_archive(blob)


def test_sink_failure_reports_position():
    class Broken(io.RawIOBase):
        def write(self, b):
            raise OSError("disk full")

    with pytest.raises(OSError, match="byte 0"):
        write_archive(TensorArchive.from_arrays([("w", np.ones(2))]), Broken())


def test_entry_invariants():
    with pytest.raises(ValueError):
        TensorEntry("", (1,), [0.0])
    with pytest.raises(ValueError):
        TensorEntry("w", (2, 2), [0.0] * 3)
    with pytest.raises(ValueError):
        TensorArchive([TensorEntry("w", (1,), [0]), TensorEntry("w", (1,), [0])])


def test_total_scalars():
    assert total_scalars(TensorArchive()) == 0
    a = TensorArchive.from_arrays([("a", np.zeros((2, 2))), ("b", np.zeros(3))])
    assert total_scalars(a) == 7


def test_total_scalars_matches_data_lengths(rng):
    a = random_archive(rng, 12)
    assert total_scalars(a) == sum(len(e.data) for e in a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=20), max_size=6))
def test_roundtrip_property(tensors):
    a = TensorArchive.from_arrays((f"x{i}", np.array(t, np.float32)) for i, t in enumerate(tensors))
    assert read_archive(_write(a)) == a
