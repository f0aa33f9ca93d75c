"""Architecture-decoupled page matrix: flatten checkpoints into P x D rows and back."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .tensor_io import TensorArchive, TensorEntry, total_scalars


class LayoutError(ValueError):
    """Page matrix and manifest (or model layout) do not agree."""


@dataclass(frozen=True)
class TableRow:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class PageManifest:
    page_size: int
    total_scalars: int
    page_count: int
    pad_count: int
    tensor_table: Tuple[TableRow, ...] = field(default=())
    mask_digest: Optional[str] = None

    def __post_init__(self):
        D, T, P = self.page_size, self.total_scalars, self.page_count
        if D < 1 or P < 1 or T < 0:
            raise LayoutError(f"invalid manifest sizes D={D} T={T} P={P}")
        if P != -(-T // D) or P * D != T + self.pad_count or not 0 <= self.pad_count < D:
            raise LayoutError(f"inconsistent manifest: D={D} T={T} P={P} pad={self.pad_count}")
        expected = 0
        for row in self.tensor_table:
            if row.offset != expected:
                raise LayoutError(f"tensor_table not contiguous at {row.name!r}")
            expected += row.size
        # masked manifests describe the unmasked layout, so T only bounds it from below
        if self.mask_digest is None and self.tensor_table and expected != T:
            raise LayoutError(f"tensor_table covers {expected} scalars, manifest says {T}")

    def to_dict(self) -> dict:
        return {
            "page_size": self.page_size,
            "total_scalars": self.total_scalars,
            "page_count": self.page_count,
            "pad_count": self.pad_count,
            "tensor_table": [
                {"name": r.name, "shape": list(r.shape), "offset": r.offset} for r in self.tensor_table
            ],
            "mask_digest": self.mask_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PageManifest":
        try:
            table = tuple(TableRow(r["name"], tuple(r["shape"]), int(r["offset"])) for r in d["tensor_table"])
            return cls(
                page_size=int(d["page_size"]),
                total_scalars=int(d["total_scalars"]),
                page_count=int(d["page_count"]),
                pad_count=int(d["pad_count"]),
                tensor_table=table,
                mask_digest=d.get("mask_digest"),
            )
        except (KeyError, TypeError) as exc:
            raise LayoutError(f"malformed manifest record: {exc}") from exc

    def tensor_ranges(self) -> List[Tuple[str, int, int]]:
        """``(name, start, stop)`` scalar ranges in stream order."""
        return [(r.name, r.offset, r.offset + r.size) for r in self.tensor_table]


def _table_for(archive: TensorArchive) -> Tuple[TableRow, ...]:
    rows, offset = [], 0
    for e in archive:
        rows.append(TableRow(e.name, e.shape, offset))
        offset += e.size
    return tuple(rows)


def _pages_from_stream(stream: np.ndarray, page_size: int) -> Tuple[np.ndarray, int, int]:
    T = stream.size
    P = -(-T // page_size)
    pad = P * page_size - T
    W = np.zeros(P * page_size, dtype=np.float32)
    W[:T] = stream
    return W.reshape(P, page_size), P, pad


def flatten(archive: TensorArchive, page_size: int) -> Tuple[np.ndarray, PageManifest]:
    """Concatenate every tensor in order and reshape into a zero-padded P x D matrix."""
    if int(page_size) < 1:
        raise ValueError(f"page_size must be >= 1, got {page_size}")
    if len(archive) == 0:
        raise ValueError("cannot flatten an empty archive")
    page_size = int(page_size)
    W, P, pad = _pages_from_stream(archive.stream(), page_size)
    manifest = PageManifest(page_size, total_scalars(archive), P, pad, _table_for(archive))
    return W, manifest


def unflatten(matrix: np.ndarray, manifest: PageManifest) -> TensorArchive:
    """Inverse of :func:`flatten`: drop padding and restore named tensors."""
    matrix = np.asarray(matrix)
    expected = (manifest.page_count, manifest.page_size)
    if matrix.shape != expected:
        raise LayoutError(f"page matrix has shape {matrix.shape}, manifest expects {expected}")
    if manifest.mask_digest is not None:
        raise LayoutError("masked manifests cannot be unflattened directly; use scatter_masked")
    stream = matrix.astype(np.float32, copy=False).reshape(-1)[: manifest.total_scalars]
    return TensorArchive(
        TensorEntry(r.name, r.shape, stream[r.offset : r.offset + r.size].copy())
        for r in manifest.tensor_table
    )


def mask_digest(mask: TensorArchive) -> str:
    h = hashlib.sha256()
    for e in mask:
        h.update(e.name.encode("utf-8") + b"\0")
        h.update(np.asarray(e.shape, dtype="<i8").tobytes())
        h.update((e.data != 0).astype(np.uint8).tobytes())
    return h.hexdigest()


def _check_mask(archive: TensorArchive, mask: TensorArchive) -> np.ndarray:
    if [(e.name, e.shape) for e in archive] != [(e.name, e.shape) for e in mask]:
        raise ValueError("mask names/shapes do not match the archive")
    flat = mask.stream()
    if not np.all((flat == 0.0) | (flat == 1.0)):
        raise ValueError("mask values must be exactly 0.0 or 1.0")
    return flat == 1.0


def flatten_masked(
    archive: TensorArchive, mask: TensorArchive, page_size: int
) -> Tuple[np.ndarray, PageManifest]:
    """Pack only the scalars kept by a binary ``mask`` (pruned networks).

    The manifest keeps the full tensor table plus the mask digest; decode with
    :func:`scatter_masked` and the same mask.
    """
    if int(page_size) < 1:
        raise ValueError(f"page_size must be >= 1, got {page_size}")
    if len(archive) == 0:
        raise ValueError("cannot flatten an empty archive")
    keep = _check_mask(archive, mask)
    kept = archive.stream()[keep]
    if kept.size == 0:
        raise ValueError("mask removes every scalar")
    W, P, pad = _pages_from_stream(kept, int(page_size))
    manifest = PageManifest(int(page_size), int(kept.size), P, pad, _table_for(archive), mask_digest(mask))
    return W, manifest


def scatter_masked(matrix: np.ndarray, manifest: PageManifest, mask: TensorArchive) -> TensorArchive:
    """Put packed scalars back at their mask positions; pruned slots are zero."""
    if manifest.mask_digest != mask_digest(mask):
        raise LayoutError("mask does not match the manifest digest")
    matrix = np.asarray(matrix)
    if matrix.shape != (manifest.page_count, manifest.page_size):
        raise LayoutError(f"page matrix has shape {matrix.shape}, manifest expects "
                          f"{(manifest.page_count, manifest.page_size)}")
    keep = mask.stream() == 1.0
    full = np.zeros(keep.size, dtype=np.float32)
    full[keep] = matrix.reshape(-1)[: manifest.total_scalars]
    return TensorArchive(
        TensorEntry(r.name, r.shape, full[r.offset : r.offset + r.size].copy())
        for r in manifest.tensor_table
    )


def partition(archive: TensorArchive, parts: int) -> List[TensorArchive]:
    """Split the scalar stream into ``parts`` contiguous near-equal chunks.

    Earlier chunks take the remainder, so T=10, parts=4 gives sizes 3, 3, 2, 2.
    """
    parts = int(parts)
    stream = archive.stream()
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    if parts > stream.size:
        raise ValueError(f"cannot split {stream.size} scalars into {parts} parts")
    return [
        TensorArchive([TensorEntry(f"part_{i}", (chunk.size,), chunk.copy())])
        for i, chunk in enumerate(np.array_split(stream, parts))
    ]
