"""Archive-level compress / decompress helpers shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import aq_model, entropy_codec, pager
from .estimators import ArchiveCompressor
from .tensor_io import TensorArchive, TensorEntry


@dataclass
class PartResult:
    index: int
    container: bytes
    metrics: dict


def compress_archive(archive: TensorArchive, parts: int = 1, **params) -> List[PartResult]:
    """Compress ``archive`` whole (``parts=1``) or as contiguous near-equal slices.

    ``params`` are :class:`ArchiveCompressor` parameters.
    """
    pieces = [archive] if parts == 1 else pager.partition(archive, parts)
    results = []
    for i, piece in enumerate(pieces):
        comp = ArchiveCompressor(**params).fit(piece)
        extra = {"part_index": i, "parts": parts}
        blob = comp.to_bytes(extra=extra)
        m = comp.manifest_
        metrics = {
            "part_index": i,
            "parts": parts,
            "T": m.total_scalars,
            "P": m.page_count,
            "pad_count": m.pad_count,
            "recon_mse": comp.recon_mse_,
            "page_variance": _page_variance(piece, comp.page_size),
            "train_loss_first": comp.quantizer_.train_log_.losses[0] if comp.quantizer_.train_log_.losses else None,
            "train_loss_last": comp.quantizer_.train_log_.losses[-1] if comp.quantizer_.train_log_.losses else None,
            "epochs_run": comp.quantizer_.train_log_.metadata.get("epochs_run"),
            "container_bytes": len(blob),
            **comp.ratios(),
        }
        results.append(PartResult(i, blob, metrics))
    return results


def _page_variance(archive: TensorArchive, page_size: int) -> float:
    W, _ = pager.flatten(archive, page_size)
    centered = W - W.mean(axis=0)
    return float(np.einsum("pd,pd->", centered, centered) / W.shape[0])


def decompress(blob: bytes) -> TensorArchive:
    """Reconstruct the archive stored in one ``AQPK`` container."""
    c = entropy_codec.read_container(blob)
    return pager.unflatten(aq_model.reconstruct_hard(c.codes, c.books), c.manifest)


def reassemble(parts: Sequence[TensorArchive], template: TensorArchive) -> TensorArchive:
    """Concatenate partitioned streams back into ``template``'s tensor layout."""
    stream = np.concatenate([p.stream() for p in parts]) if parts else np.zeros(0, np.float32)
    if stream.size != sum(e.size for e in template):
        raise pager.LayoutError(f"parts hold {stream.size} scalars, template expects "
                                f"{sum(e.size for e in template)}")
    out, offset = [], 0
    for e in template:
        out.append(TensorEntry(e.name, e.shape, stream[offset : offset + e.size].copy()))
        offset += e.size
    return TensorArchive(out)
