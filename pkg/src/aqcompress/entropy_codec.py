"""Frequency sorting, canonical Huffman coding and the ``AQPK`` container.

Container layout (all integers little-endian)::

    b"AQPK" | version u8 | header length u32 | UTF-8 JSON header
    | codebooks: M*K*D float32 in (m, k, d) order
    | Huffman code lengths: K bytes
    | bit count u64 | packed bitstream, ceil(bit_count / 8) bytes

Codes are emitted page-major (inner loop over codebooks), MSB first within
each byte, with the final byte zero-padded.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .aq_model import AqHyper
from .pager import LayoutError, PageManifest

MAGIC = b"AQPK"
VERSION = 1
STREAM_ORDER = "page-major"
_MAX_TABLE_BITS = 16


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class CorruptionError(ContainerError):
    """Bitstream does not decode to the declared number of symbols."""


class EncodingError(ValueError):
    """A symbol has no codeword in the Huffman table."""


# -- basis-vector sorting ----------------------------------------------------


def sort_permutations(codes: np.ndarray, K: int) -> np.ndarray:
    """``perm[m]`` lists original basis indices from most to least used.

    Ties keep ascending original index (stable sort on negated counts).
    """
    codes = np.asarray(codes)
    M = codes.shape[1]
    perms = np.empty((M, K), dtype=np.int64)
    for m in range(M):
        counts = np.bincount(codes[:, m], minlength=K)
        perms[m] = np.argsort(-counts, kind="stable")
    return perms


def sort_codebooks(codes: np.ndarray, books: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Reorder each codebook by descending usage and remap codes to match."""
    M, K, _ = books.shape
    codes = np.asarray(codes)
    perms = sort_permutations(codes, K)
    new_books = np.stack([books[m][perms[m]] for m in range(M)])
    new_codes = np.empty_like(codes)
    for m in range(M):
        inverse = np.empty(K, dtype=np.int64)
        inverse[perms[m]] = np.arange(K)
        new_codes[:, m] = inverse[codes[:, m]]
    return new_books, new_codes


# -- Huffman ---------------------------------------------------------------


@dataclass(frozen=True)
class HuffmanSpec:
    """Canonical Huffman table over symbols ``0..K-1``; length 0 marks unused symbols."""

    code_lengths: Tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.code_lengths)

    @property
    def codewords(self) -> Tuple[int, ...]:
        """Canonical codeword of every symbol (0 for unused ones)."""
        lengths = self.code_lengths
        order = sorted((L, s) for s, L in enumerate(lengths) if L > 0)
        words = [0] * len(lengths)
        code, prev = 0, order[0][0] if order else 0
        for L, s in order:
            code <<= L - prev
            words[s] = code
            code += 1
            prev = L
        return tuple(words)

    def table_bits(self) -> int:
        """Storage cost of the table as stored in the container (one byte per symbol)."""
        return 8 * self.K

    def mean_length(self, counts: np.ndarray) -> float:
        counts = np.asarray(counts, dtype=np.float64)
        return float(counts @ np.asarray(self.code_lengths, dtype=np.float64) / counts.sum())


def huffman_lengths(counts) -> Tuple[int, ...]:
    """Optimal prefix-code lengths for the given symbol counts.

    Ties in the merge heap break toward lower symbol index, so the result is
    deterministic.  A single used symbol gets a 1-bit code.
    """
    counts = [int(c) for c in counts]
    used = [s for s, c in enumerate(counts) if c > 0]
    lengths = [0] * len(counts)
    if not used:
        return tuple(lengths)
    if len(used) == 1:
        lengths[used[0]] = 1
        return tuple(lengths)
    # heap items: (count, smallest symbol in subtree, member symbols)
    heap = [(counts[s], s, [s]) for s in used]
    heapq.heapify(heap)
    while len(heap) > 1:
        c1, k1, s1 = heapq.heappop(heap)
        c2, k2, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (c1 + c2, min(k1, k2), s1 + s2))
    if max(lengths) > 255:
        raise EncodingError("code length exceeds 255 bits")
    return tuple(lengths)


def symbol_counts(codes: np.ndarray, K: int) -> np.ndarray:
    """Pooled symbol frequencies across all codebooks."""
    return np.bincount(np.asarray(codes).reshape(-1), minlength=K)


def build_huffman(codes: np.ndarray, K: int) -> HuffmanSpec:
    """One table over ``0..K-1`` built from frequencies pooled over all codebooks."""
    codes = np.asarray(codes)
    if codes.size == 0:
        raise ValueError("need at least one code to build a Huffman table")
    return HuffmanSpec(huffman_lengths(symbol_counts(codes, K)))


def pack(codes: np.ndarray, spec: HuffmanSpec) -> Tuple[bytes, int]:
    """Huffman-encode ``codes`` row by row; returns ``(bytes, bit_count)``."""
    symbols = np.asarray(codes, dtype=np.int64).reshape(-1)
    if symbols.size == 0:
        return b"", 0
    lengths = np.asarray(spec.code_lengths, dtype=np.int64)
    words = np.asarray(spec.codewords, dtype=np.uint64)
    if symbols.min() < 0 or symbols.max() >= spec.K:
        raise EncodingError(f"symbol out of range [0, {spec.K})")
    sym_len = lengths[symbols]
    if np.any(sym_len == 0):
        bad = int(symbols[np.argmax(sym_len == 0)])
        raise EncodingError(f"symbol {bad} has no codeword")
    bit_count = int(sym_len.sum())
    starts = np.cumsum(sym_len) - sym_len
    owner = np.repeat(np.arange(symbols.size), sym_len)
    pos = np.arange(bit_count) - starts[owner]
    shift = (sym_len[owner] - 1 - pos).astype(np.uint64)
    bits = ((words[symbols][owner] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes(), bit_count


def unpack(data: bytes, bit_count: int, spec: HuffmanSpec, P: int, M: int) -> np.ndarray:
    """Decode exactly ``P * M`` symbols; inverse of :func:`pack`."""
    n = P * M
    if len(data) != -(-bit_count // 8):
        raise CorruptionError(f"{len(data)} bytes cannot hold exactly {bit_count} bits")
    if n == 0:
        if bit_count:
            raise CorruptionError("bits present but no symbols declared")
        return np.zeros((P, M), dtype=np.int64)
    lengths = spec.code_lengths
    used = [L for L in lengths if L > 0]
    if not used:
        raise CorruptionError("Huffman table has no symbols")
    max_len = max(used)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:bit_count]
    text = (bits + ord("0")).tobytes().decode("ascii")
    if max_len <= _MAX_TABLE_BITS:
        out = _decode_table(text, bit_count, lengths, spec.codewords, max_len, n)
    else:
        out = _decode_canonical(text, bit_count, lengths, spec.codewords, n)
    return np.asarray(out, dtype=np.int64).reshape(P, M)


def _decode_table(text, bit_count, lengths, words, max_len, n):
    size = 1 << max_len
    sym_tab = [-1] * size
    len_tab = [0] * size
    for s, (L, w) in enumerate(zip(lengths, words)):
        if L:
            lo = w << (max_len - L)
            for j in range(lo, lo + (1 << (max_len - L))):
                sym_tab[j] = s
                len_tab[j] = L
    # zero tail so the last fixed-width window never runs off the end
    padded = text + "0" * max_len
    out = []
    pos = 0
    for _ in range(n):
        window = int(padded[pos : pos + max_len], 2)
        L = len_tab[window]
        if L == 0 or pos + L > bit_count:
            raise CorruptionError(f"bitstream exhausted or invalid after {len(out)} of {n} symbols")
        out.append(sym_tab[window])
        pos += L
    if pos != bit_count:
        raise CorruptionError(f"{bit_count - pos} undecoded bits after {n} symbols")
    return out


def _decode_canonical(text, bit_count, lengths, words, n):
    lookup = {(L, w): s for s, (L, w) in enumerate(zip(lengths, words)) if L}
    max_len = max(lengths)
    out = []
    pos = 0
    for _ in range(n):
        code, L = 0, 0
        while True:
            if pos >= bit_count or L >= max_len:
                raise CorruptionError(f"bitstream exhausted or invalid after {len(out)} of {n} symbols")
            code = (code << 1) | (text[pos] == "1")
            pos += 1
            L += 1
            s = lookup.get((L, code))
            if s is not None:
                out.append(s)
                break
    if pos != bit_count:
        raise CorruptionError(f"{bit_count - pos} undecoded bits after {n} symbols")
    return out


# -- size accounting -------------------------------------------------------


def bits_per_code(K: int) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    return max(1, math.ceil(math.log2(K))) if K > 1 else 1


def bitwise_bits(P: int, M: int, K: int) -> int:
    """Fixed-width storage: ``ceil(log2 K)`` bits per code (1 bit when K == 1)."""
    return P * M * bits_per_code(K)


def huffman_bits(codes: np.ndarray, spec: HuffmanSpec) -> int:
    counts = symbol_counts(codes, spec.K)
    return int(counts @ np.asarray(spec.code_lengths, dtype=np.int64))


def compression_ratio(T, D, M, K, P, code_bits, include_table: bool = False, table_bits: int = 0) -> float:
    """Original fp32 bits over (code bits + fp32 codebook bits [+ table bits])."""
    stored = code_bits + M * K * D * 32 + (table_bits if include_table else 0)
    if stored <= 0:
        raise ValueError("stored size must be positive")
    return T * 32 / stored


def ratio_report(codes: np.ndarray, books: np.ndarray, manifest: PageManifest) -> dict:
    """The three code-representation ratios: bit-wise, Huffman alone, sorting + Huffman."""
    M, K, D = books.shape
    P, T = manifest.page_count, manifest.total_scalars
    raw_spec = build_huffman(codes, K)
    _, sorted_codes = sort_codebooks(codes, books)
    sorted_spec = build_huffman(sorted_codes, K)
    bw = bitwise_bits(P, M, K)
    hb = huffman_bits(codes, raw_spec)
    sb = huffman_bits(sorted_codes, sorted_spec)
    return {
        "bitwise_bits": bw,
        "huffman_bits": hb,
        "sorted_huffman_bits": sb,
        "codebook_bits": M * K * D * 32,
        "bitwise_ratio": compression_ratio(T, D, M, K, P, bw),
        "huffman_ratio": compression_ratio(T, D, M, K, P, hb),
        "sorted_huffman_ratio": compression_ratio(T, D, M, K, P, sb),
    }


# -- container -------------------------------------------------------------


def write_container(books: np.ndarray, codes: np.ndarray, manifest: PageManifest, hyper: AqHyper,
                    extra: Optional[dict] = None) -> bytes:
    """Sort, Huffman-code and serialize.  Identical inputs give identical bytes."""
    books = np.asarray(books, dtype=np.float32)
    codes = np.asarray(codes, dtype=np.int64)
    M, K, D = books.shape
    P = manifest.page_count
    if (hyper.M, hyper.K, hyper.D) != (M, K, D) or D != manifest.page_size:
        raise ValueError("codebook shape disagrees with hyperparameters or manifest")
    if codes.shape != (P, M):
        raise ValueError(f"codes must have shape {(P, M)}, got {codes.shape}")
    books, codes = sort_codebooks(codes, books)
    spec = build_huffman(codes, K)
    stream, bit_count = pack(codes, spec)
    header = {
        "D": D, "M": M, "K": K, "P": P,
        "pad_count": manifest.pad_count,
        "T": manifest.total_scalars,
        "stream_order": STREAM_ORDER,
        "hyper": hyper.to_dict(),
        "manifest": manifest.to_dict(),
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<BI", VERSION, len(head)),
        head,
        books.astype("<f4").tobytes(),
        bytes(spec.code_lengths),
        struct.pack("<Q", bit_count),
        stream,
    ])


@dataclass
class Container:
    books: np.ndarray
    codes: np.ndarray
    manifest: PageManifest
    hyper: AqHyper
    spec: HuffmanSpec
    bit_count: int
    extra: dict

    def __iter__(self):
        # unpacks as (books, codes, manifest, hyper)
        return iter((self.books, self.codes, self.manifest, self.hyper))


def read_container(blob: bytes) -> Container:
    blob = bytes(blob)
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 9:
        raise HeaderError("file ends inside the fixed preamble")
    version, head_len = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported AQPK version {version}")
    pos = 9 + head_len
    if len(blob) < pos:
        raise HeaderError("header truncated")
    try:
        header = json.loads(blob[9:pos].decode("utf-8"))
        D, M, K, P = (int(header[k]) for k in ("D", "M", "K", "P"))
        manifest = PageManifest.from_dict(header["manifest"])
        h = header["hyper"]
        hyper = AqHyper(D=int(h["D"]), M=int(h["M"]), K=int(h["K"]), H=int(h["H"]),
                        tau=float(h["tau"]), seed=int(h["seed"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, LayoutError) as exc:
        raise HeaderError(f"unparsable header: {exc}") from exc
    if (
        header.get("stream_order") != STREAM_ORDER
        or (hyper.D, hyper.M, hyper.K) != (D, M, K)
        or manifest.page_size != D
        or manifest.page_count != P
        or manifest.pad_count != header.get("pad_count")
        or manifest.total_scalars != header.get("T")
    ):
        raise HeaderError("header fields are inconsistent")

    nbook = M * K * D * 4
    if len(blob) < pos + nbook + K + 8:
        raise HeaderError("file too short for declared codebooks and table")
    books = np.frombuffer(blob, dtype="<f4", count=M * K * D, offset=pos).astype(np.float32).reshape(M, K, D)
    pos += nbook
    spec = HuffmanSpec(tuple(blob[pos : pos + K]))
    pos += K
    (bit_count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    stream = blob[pos:]
    if len(stream) != -(-bit_count // 8):
        raise CorruptionError(f"bitstream has {len(stream)} bytes, header declares {bit_count} bits")
    codes = unpack(stream, bit_count, spec, P, M)
    return Container(books, codes, manifest, hyper, spec, bit_count, header.get("extra", {}))
