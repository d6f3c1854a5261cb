"""The ``.cgs`` container: codebooks, one run-length-encoded index stream,
bit-packed index streams and the non-quantized position/opacity columns.

Byte layout (all integers little-endian; see format.md):

    header      48 bytes
    codebooks   k*d float32 per stored group, row-major, order dc, sh, scale, rot
    rle_counts  k_rle u32, Gaussians per code of the run-length group
    indices     one packed stream per other stored group, same order,
                ceil(log2 k) bits per Gaussian, MSB-first, byte padded
    residuals   x, y, z, opacity columns; float32, or f32 scale + int codes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .bitq import BitQuantPolicy, absmax_quantize, qmax
from .model import GROUPS, GaussianCloud, ParamGroup
from .vq import Codebook

MAGIC = b"CGS1"
VERSION = 1
FLAG_DROP_SH = 1
_HEADER = struct.Struct("<4sHHIBBBB")
_SHAPE = struct.Struct("<II")
HEADER_BYTES = _HEADER.size + 4 * _SHAPE.size  # 48
RESIDUAL_COLUMNS = (("position", 0), ("position", 1), ("position", 2), ("logit_opacity", 0))


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class CountMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def index_width(k: int) -> int:
    """Bits per packed index: ceil(log2(max(k, 2)))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    width = max(1, (k - 1).bit_length())
    if width > 32:
        raise ValueError(f"k={k} needs {width}-bit indices; at most 32 supported")
    return width


def packed_bytes(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


def pack_indices(indices: np.ndarray, k: int) -> bytes:
    width = index_width(k)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"index out of range for k={k}")
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_indices(stream: bytes, n: int, k: int) -> np.ndarray:
    width = index_width(k)
    need = packed_bytes(n, width)
    if len(stream) < need:
        raise TruncatedError(f"index stream needs {need} bytes, got {len(stream)}")
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8, count=need), count=n * width)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
    return bits.reshape(n, width).astype(np.int64) @ weights


def rle_counts(indices: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(np.asarray(indices, dtype=np.int64), minlength=k).astype(np.uint32)


def expand_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    return np.repeat(np.arange(len(counts)), counts)


def _pack_codes(values: np.ndarray, bits: int) -> bytes:
    if bits == 16:
        return values.astype("<i2").tobytes()
    if bits == 8:
        return values.astype("i1").tobytes()
    nib = (values.astype(np.int64) & 0xF).astype(np.uint8)
    if len(nib) % 2:
        nib = np.append(nib, np.uint8(0))
    return ((nib[0::2] << 4) | nib[1::2]).astype(np.uint8).tobytes()


def _unpack_codes(raw: bytes, n: int, bits: int) -> np.ndarray:
    if bits == 16:
        return np.frombuffer(raw, dtype="<i2", count=n).astype(np.int32)
    if bits == 8:
        return np.frombuffer(raw, dtype="i1", count=n).astype(np.int32)
    b = np.frombuffer(raw, dtype=np.uint8)
    nib = np.empty(2 * len(b), dtype=np.int32)
    nib[0::2] = b >> 4
    nib[1::2] = b & 0xF
    nib = nib[:n]
    return np.where(nib >= 8, nib - 16, nib)


def residual_bytes(n: int, bits: int | None) -> int:
    return 4 * n if not bits else 4 + packed_bytes(n, bits)


@dataclass
class SizeReport:
    """Byte counts per container section."""

    n: int
    header: int
    codebooks: int
    rle: int
    indices: int
    residuals: int
    accounting: str = "packed"

    @property
    def total(self) -> int:
        return self.header + self.codebooks + self.rle + self.indices + self.residuals

    @property
    def index_bytes(self) -> int:
        return self.rle + self.indices

    @property
    def quantized(self) -> int:
        return self.index_bytes + self.codebooks

    @property
    def nonquantized_fraction(self) -> float:
        return self.residuals / self.total

    @property
    def index_share(self) -> float:
        """Fraction of the quantized-parameter storage spent on indices."""
        return self.index_bytes / self.quantized if self.quantized else 0.0

    def as_dict(self) -> dict:
        return {
            "n": self.n, "accounting": self.accounting,
            "header": self.header, "codebooks": self.codebooks, "rle_counts": self.rle,
            "packed_indices": self.indices, "residuals": self.residuals, "total": self.total,
            "nonquantized_fraction": self.nonquantized_fraction, "index_share": self.index_share,
            "codebook_share": 1.0 - self.index_share if self.quantized else 0.0,
        }


def predict_size(n: int, shapes: Mapping[ParamGroup, tuple[int, int]], pos_bits: int | None = None,
                 opacity_bits: int | None = None, drop_sh: bool = False,
                 rle_group: ParamGroup = ParamGroup.ROTATION, accounting: str = "packed") -> SizeReport:
    """Analytic container size.

    ``accounting="packed"`` is the actual container. ``"u32"`` counts every
    group's indices as one uint32 per Gaussian with no sorting or run-length
    coding, i.e. plain codebook + index storage.
    """
    if accounting not in ("packed", "u32"):
        raise ValueError("accounting must be 'packed' or 'u32'")
    stored = [g for g in GROUPS if not (drop_sh and g is ParamGroup.SH)]
    codebooks = sum(4 * shapes[g][0] * shapes[g][1] for g in stored)
    if accounting == "u32":
        rle, indices = 0, 4 * n * len(stored)
    else:
        rle = 4 * shapes[rle_group][0]
        indices = sum(packed_bytes(n, index_width(shapes[g][0])) for g in stored if g is not rle_group)
    residuals = 3 * residual_bytes(n, pos_bits) + residual_bytes(n, opacity_bits)
    return SizeReport(n, HEADER_BYTES, codebooks, rle, indices, residuals, accounting)


def _policy_bits(policy: BitQuantPolicy | None) -> tuple[int | None, int | None]:
    if policy is None:
        return None, None
    extra = [f for f, b in policy.bits.items() if b is not None and f not in ("position", "logit_opacity")]
    if extra:
        raise ValueError(f"container stores {extra} through codebooks; only position/opacity take bit widths")
    return policy.bits_for("position"), policy.bits_for("logit_opacity")


def encode(cloud: GaussianCloud, codebooks: Mapping[ParamGroup, Codebook],
           policy: BitQuantPolicy | None = None, drop_sh: bool = False,
           rle_group: ParamGroup = ParamGroup.ROTATION) -> bytes:
    """Serialize a codebook-quantized cloud, sorted stably by the ``rle_group`` code."""
    rle_group = ParamGroup(rle_group)
    if drop_sh and rle_group is ParamGroup.SH:
        raise ValueError("cannot run-length encode a dropped group")
    n = cloud.count
    pos_bits, op_bits = _policy_bits(policy)
    stored = [g for g in GROUPS if not (drop_sh and g is ParamGroup.SH)]
    for g in stored:
        book = codebooks[g]
        if len(book.assignments) != n:
            raise ValueError(f"{g.value}: {len(book.assignments)} assignments for {n} Gaussians")
        if book.dim != g.dim:
            raise ValueError(f"{g.value}: codebook dim {book.dim}, expected {g.dim}")
        index_width(book.k)

    order = np.argsort(np.asarray(codebooks[rle_group].assignments), kind="stable")
    flags = FLAG_DROP_SH if drop_sh else 0
    parts = [_HEADER.pack(MAGIC, VERSION, flags, n, rle_group.code, pos_bits or 0, op_bits or 0, 0)]
    for g in GROUPS:
        k = codebooks[g].k if g in stored else 0
        parts.append(_SHAPE.pack(k, g.dim))
    for g in stored:
        parts.append(np.asarray(codebooks[g].centroids, dtype="<f4").tobytes())
    parts.append(rle_counts(codebooks[rle_group].assignments, codebooks[rle_group].k).astype("<u4").tobytes())
    for g in stored:
        if g is not rle_group:
            parts.append(pack_indices(np.asarray(codebooks[g].assignments)[order], codebooks[g].k))
    for fname, j in RESIDUAL_COLUMNS:
        column = cloud.field(fname)[order, j]
        bits = pos_bits if fname == "position" else op_bits
        if not bits:
            parts.append(column.astype("<f4").tobytes())
        else:
            ch = absmax_quantize(column, bits)
            parts.append(struct.pack("<f", ch.scale) + _pack_codes(ch.values, bits))
    return b"".join(parts)


@dataclass
class _Header:
    n: int
    drop_sh: bool
    rle_group: ParamGroup
    pos_bits: int | None
    op_bits: int | None
    shapes: dict


def _read_header(blob: bytes) -> _Header:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a CGS container (bad magic)")
    if len(blob) < HEADER_BYTES:
        raise TruncatedError("header truncated")
    magic, version, flags, n, rle_code, pos_bits, op_bits, _ = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    if rle_code >= len(GROUPS):
        raise ContainerError(f"bad run-length group code {rle_code}")
    shapes = {}
    for i, g in enumerate(GROUPS):
        k, d = _SHAPE.unpack_from(blob, _HEADER.size + i * _SHAPE.size)
        if d != g.dim:
            raise ContainerError(f"{g.value}: stored dim {d}, expected {g.dim}")
        shapes[g] = (k, d)
    if flags & ~FLAG_DROP_SH:
        raise ContainerError(f"unknown flag bits {flags:#06x}")
    drop_sh = bool(flags & FLAG_DROP_SH)
    if drop_sh and rle_code == ParamGroup.SH.code:
        raise ContainerError("run-length group is the dropped SH group")
    for b in (pos_bits, op_bits):
        if b not in (0, 4, 8, 16):
            raise ContainerError(f"bad residual bit width {b}")
    return _Header(n, drop_sh, ParamGroup.from_code(rle_code), pos_bits or None, op_bits or None, shapes)


def decode(blob: bytes) -> tuple[GaussianCloud, dict[ParamGroup, Codebook]]:
    """Rebuild the (sorted) quantized cloud and its codebooks."""
    h = _read_header(blob)
    n = h.n
    stored = [g for g in GROUPS if not (h.drop_sh and g is ParamGroup.SH)]
    pos = HEADER_BYTES

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(blob):
            raise TruncatedError(f"container truncated at byte {len(blob)}, need {pos + nbytes}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    centroids = {}
    for g in stored:
        k, d = h.shapes[g]
        centroids[g] = np.frombuffer(take(4 * k * d), dtype="<f4").reshape(k, d).astype(np.float32)
    k_rle = h.shapes[h.rle_group][0]
    counts = np.frombuffer(take(4 * k_rle), dtype="<u4")
    if int(counts.sum(dtype=np.uint64)) != n:
        raise CountMismatchError(f"run-length counts sum to {int(counts.sum(dtype=np.uint64))}, header says N={n}")
    assignments = {h.rle_group: expand_counts(counts)}
    for g in stored:
        if g is h.rle_group:
            continue
        k = h.shapes[g][0]
        idx = unpack_indices(take(packed_bytes(n, index_width(k))), n, k)
        if idx.size and idx.max() >= k:
            raise ContainerError(f"{g.value}: index {idx.max()} >= k={k}")
        assignments[g] = idx
    residual = []
    for fname, _ in RESIDUAL_COLUMNS:
        bits = h.pos_bits if fname == "position" else h.op_bits
        if not bits:
            residual.append(np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32))
        else:
            (scale,) = struct.unpack("<f", take(4))
            codes = _unpack_codes(take(packed_bytes(n, bits)), n, bits)
            residual.append(((codes / qmax(bits)) * scale).astype(np.float32))
    if pos != len(blob):
        raise ContainerError(f"{len(blob) - pos} trailing bytes")

    books = {g: Codebook(g.value, centroids[g], assignments[g]) for g in stored}
    fields = {g.value: centroids[g][assignments[g]] for g in stored}
    if h.drop_sh:
        fields[ParamGroup.SH.value] = np.zeros((n, ParamGroup.SH.dim), dtype=np.float32)
    cloud = GaussianCloud.from_fields(
        position=np.stack(residual[:3], axis=1),
        logit_opacity=residual[3][:, None],
        **fields,
    )
    return cloud, books


def container_size_report(blob: bytes, accounting: str = "packed") -> SizeReport:
    h = _read_header(blob)
    report = predict_size(h.n, h.shapes, h.pos_bits, h.op_bits, h.drop_sh, h.rle_group, accounting)
    if accounting == "packed" and report.total != len(blob):
        raise ContainerError(f"size formula gives {report.total} bytes, container has {len(blob)}")
    return report


def header_info(blob: bytes) -> dict:
    h = _read_header(blob)
    return {
        "n": h.n, "drop_sh": h.drop_sh, "rle_group": h.rle_group.value,
        "position_bits": h.pos_bits or 32, "opacity_bits": h.op_bits or 32,
        "codebooks": {g.value: {"k": k, "d": d} for g, (k, d) in h.shapes.items()},
    }
