"""Reader/writer for the uncompressed ``AQT0`` checkpoint format.

Layout::

    b"AQT0" | version (u8) | header length (u32 LE) | UTF-8 JSON header | payload

The header is a JSON object ``{"entries": [{"name", "shape", "offset",
"nbytes"}, ...]}`` and the payload holds the little-endian float32 data of
every entry back to back, in entry order.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Sequence, Union

import numpy as np

MAGIC = b"AQT0"
VERSION = 1
_DTYPE = np.dtype("<f4")

PathOrFile = Union[str, os.PathLike, BinaryIO]


class ArchiveError(ValueError):
    """Base class for malformed ``AQT0`` input."""


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class HeaderError(ArchiveError):
    """Header text is unparsable or inconsistent with the payload."""


class TruncatedError(ArchiveError):
    pass


class TrailingDataError(ArchiveError):
    pass


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("tensor name must be a non-empty string")
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"tensor {self.name!r}: shape entries must be positive, got {shape}")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32).reshape(-1))
        if data.size != math.prod(shape):
            raise ValueError(
                f"tensor {self.name!r}: data length {data.size} != product of shape {shape}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """Data reshaped to ``shape`` (read-only view)."""
        return self.data.reshape(self.shape)


class TensorArchive(Sequence):
    """Ordered collection of named float32 tensors.

    Immutable once constructed; entry order is significant.
    """

    def __init__(self, entries: Iterable[TensorEntry] = ()):
        self._entries = tuple(entries)
        names = [e.name for e in self._entries]
        if len(set(names)) != len(names):
            raise ValueError("tensor names must be unique")

    @classmethod
    def from_arrays(cls, items) -> "TensorArchive":
        """Build from ``(name, ndarray)`` pairs or a mapping (insertion order kept)."""
        if hasattr(items, "items"):
            items = items.items()
        entries = []
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float32)
            shape = arr.shape if arr.ndim else (1,)
            entries.append(TensorEntry(name, shape, arr.reshape(-1)))
        return cls(entries)

    def __getitem__(self, idx):
        if isinstance(idx, str):
            for e in self._entries:
                if e.name == idx:
                    return e
            raise KeyError(idx)
        return self._entries[idx]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[TensorEntry]:
        return iter(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorArchive) or len(self) != len(other):
            return False
        return all(
            a.name == b.name
            and a.shape == b.shape
            and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self, other)
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{e.name}{list(e.shape)}" for e in self)
        return f"TensorArchive([{inner}])"

    @property
    def names(self) -> list:
        return [e.name for e in self._entries]

    def stream(self) -> np.ndarray:
        """All scalars concatenated in entry order."""
        if not self._entries:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([e.data for e in self._entries])


def total_scalars(archive: TensorArchive) -> int:
    return sum(math.prod(e.shape) for e in archive)


def _header_bytes(archive: TensorArchive) -> bytes:
    records = []
    offset = 0
    for e in archive:
        nbytes = e.size * _DTYPE.itemsize
        records.append({"name": e.name, "shape": list(e.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return json.dumps({"entries": records}, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def archive_to_bytes(archive: TensorArchive) -> bytes:
    header = _header_bytes(archive)
    parts = [MAGIC, struct.pack("<BI", VERSION, len(header)), header]
    parts.extend(e.data.astype(_DTYPE, copy=False).tobytes() for e in archive)
    return b"".join(parts)


def write_archive(archive: TensorArchive, destination: PathOrFile) -> int:
    """Serialize ``archive``; returns the number of bytes written."""
    blob = archive_to_bytes(archive)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            return _write_all(fh, blob)
    return _write_all(destination, blob)


def _write_all(fh: BinaryIO, blob: bytes) -> int:
    written = 0
    view = memoryview(blob)
    while written < len(blob):
        try:
            n = fh.write(view[written:])
        except OSError as exc:
            raise OSError(f"write failed at byte {written}: {exc}") from exc
        if not n:
            raise OSError(f"write failed at byte {written}: sink accepted no data")
        written += n
    return written


def archive_from_bytes(blob: bytes) -> TensorArchive:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    if len(blob) < 9:
        raise TruncatedError("file ends inside the fixed preamble")
    version, header_len = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported AQT0 version {version}")
    start = 9 + header_len
    if len(blob) < start:
        raise TruncatedError(f"header declares {header_len} bytes, only {len(blob) - 9} present")
    try:
        header = json.loads(blob[9:start].decode("utf-8"))
        records = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"unparsable header: {exc}") from exc

    entries = []
    expected = 0
    for rec in records:
        try:
            name, shape, offset, nbytes = rec["name"], rec["shape"], rec["offset"], rec["nbytes"]
            if rec.get("dtype", "float32") != "float32":
                raise HeaderError(f"tensor {name!r}: unsupported dtype {rec['dtype']!r}")
            count = math.prod(int(s) for s in shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"malformed header record {rec!r}") from exc
        if offset != expected or nbytes != count * _DTYPE.itemsize:
            raise HeaderError(f"tensor {name!r}: offset/length inconsistent with shape {shape}")
        lo = start + offset
        if len(blob) < lo + nbytes:
            raise TruncatedError(f"payload truncated inside tensor {name!r}")
        data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=lo).astype(np.float32)
        try:
            entries.append(TensorEntry(name, tuple(shape), data))
        except ValueError as exc:
            raise HeaderError(str(exc)) from exc
        expected += nbytes
    if len(blob) != start + expected:
        raise TrailingDataError(f"{len(blob) - start - expected} bytes of trailing data")
    try:
        return TensorArchive(entries)
    except ValueError as exc:
        raise HeaderError(str(exc)) from exc


def read_archive(source: PathOrFile) -> TensorArchive:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return archive_from_bytes(fh.read())
    if isinstance(source, (bytes, bytearray, memoryview)):
        return archive_from_bytes(bytes(source))
    return archive_from_bytes(source.read())


def roundtrip(archive: TensorArchive) -> TensorArchive:
    buf = io.BytesIO()
    write_archive(archive, buf)
    return archive_from_bytes(buf.getvalue())
