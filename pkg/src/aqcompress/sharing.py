"""Cross-layer basis-vector sharing statistics.

A page belongs to a parameter group when any of its scalars falls inside
one of the group's ``[start, stop)`` stream ranges, so pages straddling a
tensor boundary count toward both neighbours.
"""

from __future__ import annotations

import csv
import io
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .pager import PageManifest

Ranges = Sequence[Tuple[int, int]]


def groups_per_tensor(manifest: PageManifest) -> Dict[str, List[Tuple[int, int]]]:
    return {name: [(start, stop)] for name, start, stop in manifest.tensor_ranges()}


def parse_group_file(text: str) -> Dict[str, List[Tuple[int, int]]]:
    """Parse ``name,start,stop`` rows (one range per row, repeated names merge)."""
    groups: Dict[str, List[Tuple[int, int]]] = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or row[0].startswith("#") or row[0] == "name":
            continue
        if len(row) != 3:
            raise ValueError(f"line {lineno}: expected name,start,stop")
        try:
            start, stop = int(row[1]), int(row[2])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: start/stop must be integers") from exc
        if not 0 <= start < stop:
            raise ValueError(f"line {lineno}: need 0 <= start < stop")
        groups.setdefault(row[0].strip(), []).append((start, stop))
    if not groups:
        raise ValueError("group file defines no groups")
    return groups


def group_pages(ranges: Ranges, manifest: PageManifest) -> np.ndarray:
    """Sorted indices of pages overlapping any of ``ranges``."""
    D, T = manifest.page_size, manifest.total_scalars
    hit = np.zeros(manifest.page_count, dtype=bool)
    for start, stop in ranges:
        if not 0 <= start < stop <= T:
            raise ValueError(f"range [{start}, {stop}) outside [0, {T})")
        hit[start // D : (stop - 1) // D + 1] = True
    return np.flatnonzero(hit)


def group_multiset(codes: np.ndarray, manifest: PageManifest, ranges: Ranges, K: int) -> np.ndarray:
    """Counts over global basis indices ``m * K + k`` used by the group's pages."""
    pages = group_pages(ranges, manifest)
    if pages.size == 0:
        raise ValueError("group covers no pages")
    codes = np.asarray(codes)
    M = codes.shape[1]
    flat = (codes[pages] + np.arange(M) * K).reshape(-1)
    return np.bincount(flat, minlength=M * K)


def sharing_factor(a: np.ndarray, b: np.ndarray) -> float:
    """``|a ∩ b| / min(|a|, |b|)`` with min-count multiset intersection."""
    a, b = np.asarray(a), np.asarray(b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 or nb == 0:
        raise ValueError("sharing factor of an empty multiset is undefined")
    return float(np.minimum(a, b).sum() / min(na, nb))


def sharing_matrix(codes, manifest: PageManifest, groups: Mapping[str, Ranges], K: int):
    names = list(groups)
    sets = [group_multiset(codes, manifest, groups[n], K) for n in names]
    S = np.array([[sharing_factor(a, b) for b in sets] for a in sets])
    return names, S


def usage_stats(codes: np.ndarray, K: int) -> List[dict]:
    """Per codebook: usage counts sorted descending and the cumulative coverage curve.

    ``coverage[i]`` is the fraction of the codebook's page slots served by its
    ``i + 1`` most used basis vectors, i.e. by the top ``(i + 1) / K`` fraction.
    """
    codes = np.asarray(codes)
    if codes.size == 0:
        raise ValueError("no codes")
    out = []
    for m in range(codes.shape[1]):
        counts = np.sort(np.bincount(codes[:, m], minlength=K))[::-1]
        out.append({
            "codebook": m,
            "sorted_counts": counts,
            "fraction": np.arange(1, K + 1) / K,
            "coverage": np.cumsum(counts) / counts.sum(),
        })
    return out


def infer_types(manifest: PageManifest) -> Dict[str, str]:
    """Classify tensors as ``bias`` when their name ends in "bias", else ``weight``."""
    return {r.name: ("bias" if r.name.endswith("bias") else "weight") for r in manifest.tensor_table}


def parse_type_file(text: str) -> Dict[str, str]:
    types = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or row[0].startswith("#") or row[0] == "name":
            continue
        if len(row) != 2 or row[1].strip() not in ("weight", "bias"):
            raise ValueError(f"line {lineno}: expected name,weight|bias")
        types[row[0].strip()] = row[1].strip()
    return types


def type_sharing(codes: np.ndarray, manifest: PageManifest, type_map: Mapping[str, str], K: int) -> Dict[str, np.ndarray]:
    """For each type, an (M, K) array of the percentage of that type's pages using each basis vector.

    A page involves a type when any of its scalars lies in a tensor of that
    type; a page may involve both.  Types with no pages get all-zero rows.
    """
    missing = [r.name for r in manifest.tensor_table if r.name not in type_map]
    if missing:
        raise ValueError(f"unclassified tensors: {missing}")
    codes = np.asarray(codes)
    M = codes.shape[1]
    out = {}
    for kind in ("weight", "bias"):
        ranges = [(s, e) for name, s, e in manifest.tensor_ranges() if type_map[name] == kind]
        pct = np.zeros((M, K))
        if ranges:
            pages = group_pages(ranges, manifest)
            for m in range(M):
                pct[m] = 100.0 * np.bincount(codes[pages, m], minlength=K) / pages.size
        out[kind] = pct
    return out


def write_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
