"""N:M sparse data model, bitmap codec, storage-cost formulas and the NMSP file format.

Groups always run along the reduction axis of the matrix (axis 0 for a
``K x L`` weight that is contracted as ``x @ W``).  Inside a group, bit ``i``
of the mask marks element ``i``; stored values follow the set bits from the
least significant one upwards and are zero padded to exactly ``n`` slots.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import BinaryIO, Union

import numpy as np

from .errors import BadMagic, CorruptStream, InvalidConfig, PatternViolation, UnsupportedVersion

VALID_Q = (4, 8, 16, 32)
MAGIC = b"NMSP"
VERSION = 1
HEADER = struct.Struct("<4sBBBBIIB3x")  # 20 bytes


@dataclass(frozen=True)
class NmConfig:
    n: int
    m: int
    q: int = 16

    def __post_init__(self):
        if not (1 <= self.n <= self.m <= 64):
            raise InvalidConfig(f"need 1 <= n <= m <= 64, got {self.n}:{self.m}")
        if self.q not in VALID_Q:
            raise InvalidConfig(f"q must be one of {VALID_Q}, got {self.q}")

    @classmethod
    def parse(cls, text: str, q: int = 16) -> "NmConfig":
        try:
            n, m = (int(part) for part in text.split(":"))
        except ValueError:
            raise InvalidConfig(f"bad N:M pattern {text!r}") from None
        return cls(n, m, q)

    @property
    def density(self) -> Fraction:
        return Fraction(self.n, self.m)

    def __str__(self):
        return f"{self.n}:{self.m}"


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def clog2(x: int) -> int:
    """Bits needed to index ``x`` distinct items."""
    return (int(x) - 1).bit_length() if x > 1 else 0


@dataclass(frozen=True, eq=False)
class CompressedMatrix:
    """Bitmap-packed N:M matrix.

    ``masks`` holds one m-bit word per group, ordered group-major: the index of
    group ``g`` along the reduction axis and position ``j`` along the other axis
    is ``g * J + j``.  ``values`` holds ``n`` slots per group in the same order.
    """

    config: NmConfig
    rows: int
    cols: int
    masks: np.ndarray
    values: np.ndarray
    group_axis: int = 0

    def __post_init__(self):
        object.__setattr__(self, "masks", np.ascontiguousarray(self.masks, dtype=np.uint64).ravel())
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.int64).ravel())
        if self.group_axis not in (0, 1):
            raise CorruptStream(f"group_axis must be 0 or 1, got {self.group_axis}")
        if self.masks.size != self.num_groups:
            raise CorruptStream(f"expected {self.num_groups} masks, got {self.masks.size}")
        if self.values.size != self.num_groups * self.config.n:
            raise CorruptStream(
                f"expected {self.num_groups * self.config.n} value slots, got {self.values.size}"
            )
        if self.config.m < 64 and np.any(self.masks >> np.uint64(self.config.m)):
            raise CorruptStream("mask bits set beyond the group size")

    @property
    def reduction_extent(self) -> int:
        return self.rows if self.group_axis == 0 else self.cols

    @property
    def other_extent(self) -> int:
        return self.cols if self.group_axis == 0 else self.rows

    @property
    def groups_per_line(self) -> int:
        return _ceil_div(self.reduction_extent, self.config.m)

    @property
    def num_groups(self) -> int:
        return self.groups_per_line * self.other_extent

    def group_grid(self):
        """Masks as ``(G, J)`` and values as ``(G, J, n)`` views."""
        g, j = self.groups_per_line, self.other_extent
        return self.masks.reshape(g, j), self.values.reshape(g, j, self.config.n)

    def storage_bits(self) -> int:
        return storage_cost(StorageFormat.BITMAP, (self.reduction_extent, self.other_extent),
                            self.config, self.num_groups * self.config.n)

    def __eq__(self, other):
        if not isinstance(other, CompressedMatrix):
            return NotImplemented
        return (self.config == other.config and self.rows == other.rows and self.cols == other.cols
                and self.group_axis == other.group_axis
                and np.array_equal(self.masks, other.masks)
                and np.array_equal(self.values, other.values))


def _bit_positions(m: int) -> np.ndarray:
    return np.arange(m, dtype=np.uint64)


def mask_bits(masks: np.ndarray, m: int) -> np.ndarray:
    """Expand m-bit words into a trailing boolean axis (LSB first)."""
    words = np.asarray(masks, dtype=np.uint64)
    return ((words[..., None] >> _bit_positions(m)) & np.uint64(1)).astype(bool)


def pack_mask_bits(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`mask_bits` over the trailing axis."""
    bits = np.asarray(bits, dtype=np.uint64)
    return (bits << _bit_positions(bits.shape[-1])).sum(axis=-1, dtype=np.uint64)


def _check_range(dense: np.ndarray, q: int):
    lo, hi = -(1 << (q - 1)), (1 << (q - 1)) - 1
    if dense.size and (dense.min() < lo or dense.max() > hi):
        raise ValueError(f"values do not fit in {q}-bit signed integers")


def _as_groups(dense: np.ndarray, m: int, group_axis: int) -> np.ndarray:
    a = dense if group_axis == 0 else dense.T
    k, j = a.shape
    g = _ceil_div(k, m) if k else 0
    padded = np.zeros((g * m, j), dtype=np.int64)
    padded[:k] = a
    return padded.reshape(g, m, j).transpose(0, 2, 1)  # (G, J, m)


def compress(dense, config: NmConfig, group_axis: int = 0) -> CompressedMatrix:
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise ValueError("dense matrix must be 2-D")
    if not np.issubdtype(dense.dtype, np.integer):
        raise ValueError("dense matrix must hold quantized integers")
    _check_range(dense, config.q)
    n, m = config.n, config.m
    groups = _as_groups(dense.astype(np.int64), m, group_axis)
    nz = groups != 0
    counts = nz.sum(axis=-1)
    bad = np.flatnonzero(counts.ravel() > n)
    if bad.size:
        idx = int(bad[0])
        raise PatternViolation(idx, int(counts.ravel()[idx]), n)
    # stable sort puts nonzeros first, in ascending position
    order = np.argsort(~nz, axis=-1, kind="stable")[..., :n]
    slots = np.take_along_axis(groups, order, axis=-1)
    slots = np.where(np.arange(n) < counts[..., None], slots, 0)
    return CompressedMatrix(config, dense.shape[0], dense.shape[1],
                            pack_mask_bits(nz), slots, group_axis)


def decompress(compressed: CompressedMatrix) -> np.ndarray:
    cfg = compressed.config
    masks, values = compressed.group_grid()
    bits = mask_bits(masks, cfg.m)  # (G, J, m)
    counts = bits.sum(axis=-1)
    if np.any(counts > cfg.n):
        raise CorruptStream("mask popcount exceeds n")
    slot = np.cumsum(bits, axis=-1) - 1
    slot = np.clip(slot, 0, cfg.n - 1)
    groups = np.where(bits, np.take_along_axis(values, slot, axis=-1), 0)
    g, j, m = groups.shape
    a = groups.transpose(0, 2, 1).reshape(g * m, j)[: compressed.reduction_extent]
    return a if compressed.group_axis == 0 else a.T.copy()


def compression_ratio(config: NmConfig, cols_along_group_axis: int) -> Fraction:
    """Dense bits over bitmap bits for one line of ``C`` elements along the group axis."""
    c = int(cols_along_group_axis)
    if c < 1:
        raise ValueError("need at least one element along the group axis")
    q = config.q
    return Fraction(q * c, q * _ceil_div(c, config.m) * config.n + c)


class StorageFormat(enum.Enum):
    BITMAP = "bitmap"
    COO = "coo"
    CSR = "csr"
    CSC = "csc"
    STEP_INDEX = "step"


def storage_cost(fmt: StorageFormat, dims, config: NmConfig, nnz: int, step_bits: int | None = None) -> int:
    """Total bits to store a sparse ``rows x cols`` matrix in ``fmt``.

    ``rows`` is the reduction (group) axis.  ``step_bits=None`` sizes the step
    index for the worst-case gap inside a column, so no filler entries are ever
    needed for "at most N" groups.
    """
    fmt = StorageFormat(fmt)
    rows, cols = (int(d) for d in dims)
    if nnz > rows * cols:
        raise ValueError("nnz exceeds the number of elements")
    q = config.q
    if fmt is StorageFormat.BITMAP:
        return q * _ceil_div(rows, config.m) * config.n * cols + rows * cols
    if fmt is StorageFormat.COO:
        return nnz * (q + clog2(rows) + clog2(cols))
    if fmt is StorageFormat.CSR:
        return nnz * (q + clog2(cols)) + (rows + 1) * clog2(nnz + 1)
    if fmt is StorageFormat.CSC:
        return nnz * (q + clog2(rows)) + (cols + 1) * clog2(nnz + 1)
    if step_bits is None:
        step_bits = max(1, clog2(rows))
    return nnz * (q + step_bits)


def random_nm_matrix(rng: np.random.Generator, rows: int, cols: int, config: NmConfig,
                     full: bool = True, group_axis: int = 0) -> np.ndarray:
    """Random q-bit integer matrix that already satisfies the N:M pattern.

    With ``full`` every group keeps exactly ``n`` (nonzero) values, otherwise the
    kept count per group is drawn uniformly from ``0..n``.
    """
    k, j = (rows, cols) if group_axis == 0 else (cols, rows)
    n, m, q = config.n, config.m, config.q
    g = _ceil_div(k, m)
    hi = (1 << (q - 1)) - 1
    vals = rng.integers(1, hi + 1, size=(g, j, m)) * rng.choice([-1, 1], size=(g, j, m))
    keys = rng.random((g, j, m))
    rank = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    keep_n = np.full((g, j, 1), n) if full else rng.integers(0, n + 1, size=(g, j, 1))
    groups = np.where(rank < keep_n, vals, 0)
    a = groups.transpose(0, 2, 1).reshape(g * m, j)[:k]
    return a if group_axis == 0 else a.T.copy()


# -- NMSP stream -------------------------------------------------------------

def _pack_fields(words: np.ndarray, width: int) -> bytes:
    words = np.asarray(words, dtype=np.uint64)
    if words.size == 0:
        return b""
    bits = ((words[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_fields(buf: bytes, count: int, width: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: count * width]
    return pack_mask_bits(bits.reshape(count, width))


def _section_bytes(count: int, width: int) -> int:
    return _ceil_div(count * width, 8)


def to_bytes(compressed: CompressedMatrix) -> bytes:
    cfg = compressed.config
    header = HEADER.pack(MAGIC, VERSION, cfg.q, cfg.n, cfg.m, compressed.rows, compressed.cols,
                         compressed.group_axis)
    mask_sec = _pack_fields(compressed.masks, cfg.m)
    raw = compressed.values.astype(np.int64).view(np.uint64) & np.uint64((1 << cfg.q) - 1)
    value_sec = _pack_fields(raw, cfg.q)
    return header + mask_sec + value_sec


def from_bytes(data: bytes) -> CompressedMatrix:
    if len(data) < HEADER.size:
        raise CorruptStream(f"stream shorter than the {HEADER.size}-byte header")
    magic, version, q, n, m, rows, cols, axis = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} not supported")
    try:
        cfg = NmConfig(n, m, q)
    except InvalidConfig as exc:
        raise CorruptStream(str(exc)) from None
    if axis not in (0, 1):
        raise CorruptStream(f"bad group axis {axis}")
    k, j = (rows, cols) if axis == 0 else (cols, rows)
    groups = _ceil_div(k, m) * j
    mask_len = _section_bytes(groups, m)
    value_len = _section_bytes(groups * n, q)
    body = data[HEADER.size:]
    if len(body) != mask_len + value_len:
        raise CorruptStream(f"expected {mask_len + value_len} payload bytes, got {len(body)}")
    masks = _unpack_fields(body[:mask_len], groups, m)
    raw = _unpack_fields(body[mask_len:], groups * n, q).astype(np.int64)
    sign = np.int64(1 << (q - 1))
    values = np.where(raw >= sign, raw - (sign << 1), raw) if q < 64 else raw
    return CompressedMatrix(cfg, rows, cols, masks, values, axis)


PathOrFile = Union[str, os.PathLike, BinaryIO]


def write_nmsp(compressed: CompressedMatrix, sink: PathOrFile) -> int:
    data = to_bytes(compressed)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)
    return len(data)


def read_nmsp(source: PathOrFile) -> CompressedMatrix:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return from_bytes(fh.read())
    if isinstance(source, (bytes, bytearray)):
        return from_bytes(bytes(source))
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return from_bytes(source.read())
    raise TypeError(f"cannot read NMSP data from {type(source).__name__}")
