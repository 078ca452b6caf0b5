"""DMME front end: geometry, tiling into passes, traces and the cycle model.

PE rows carry output features (the weight side streams in from the west),
PE columns carry tokens (activations stream from the north, one input-memory
bank per column).  A pass fills every PE of all ``h`` arrays with one output
element, streams the reduction axis through, then drains the results east.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import GeometryMismatch, PatternViolation
from ..nmformat import CompressedMatrix, NmConfig, mask_bits
from . import backend

PE_OPERAND_BITS = 16


class Mode(enum.Enum):
    SPARSE_DENSE = "sparse"
    DENSE_DENSE = "dense"


class Routing(enum.Enum):
    DIRECT = "direct"
    MUX_SELECT = "mux"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class EngineGeometry:
    h: int
    r: int
    c: int
    nm: NmConfig

    def __post_init__(self):
        if min(self.h, self.r, self.c) < 1:
            raise GeometryMismatch("h, r and c must all be at least 1")
        if self.nm.n * self.h != self.nm.m:
            raise GeometryMismatch(
                f"input bandwidth balance needs n*h == m, got {self.nm.n}*{self.h} != {self.nm.m}")

    @classmethod
    def parse(cls, text: str, nm: NmConfig) -> "EngineGeometry":
        try:
            h, r, c = (int(x) for x in text.lower().split("x"))
        except ValueError:
            raise GeometryMismatch(f"bad geometry {text!r}, expected HxRxC") from None
        return cls(h, r, c, nm)

    @classmethod
    def default(cls, nm: NmConfig, r: int = 16, c: int = 8) -> "EngineGeometry":
        return cls(nm.m // nm.n, r, c, nm) if nm.m % nm.n == 0 else cls(1, r, c, nm)

    @property
    def mac_units(self) -> int:
        return self.h * self.r * self.c * self.nm.n

    def __str__(self):
        return f"{self.h}x{self.r}x{self.c}"


# -- cycle model ---------------------------------------------------------------
# Every cycle constant of the engine lives here.  A pass costs
#   fill_skew + steps  compute cycles, then  drain  shifting cycles.
# The 1:2 dataflow example (2x4 inputs times 4x2 weights) runs as a single pass
# on FIGURE_GEOMETRY and takes 4 + 1 = 5 dense / 2 + 1 = 3 sparse compute
# cycles; the drain that follows is reported separately (drain_cycles).

FIGURE_NM = NmConfig(1, 2, 16)
FIGURE_GEOMETRY = EngineGeometry(2, 1, 2, FIGURE_NM)


def fill_skew(g: EngineGeometry) -> int:
    return g.r + g.c - 2


def drain_cycles(g: EngineGeometry) -> int:
    return g.c


def stream_steps(mode: Mode, k: int, nm: NmConfig) -> int:
    """Cycles a PE spends on a reduction of length ``k``: one group (sparse) or n elements (dense)."""
    return math.ceil(k / (nm.m if mode is Mode.SPARSE_DENSE else nm.n))


def pass_cycles(mode: Mode, k: int, g: EngineGeometry) -> tuple[int, int]:
    """(compute, drain) cycles of one pass."""
    return stream_steps(mode, k, g.nm) + fill_skew(g), drain_cycles(g)


def pass_count(mode: Mode, j: int, l: int, g: EngineGeometry, batch: int = 1) -> int:
    if mode is Mode.SPARSE_DENSE:
        return batch * math.ceil(l / (g.h * g.r)) * math.ceil(j / g.c)
    return math.ceil(batch * math.ceil(l / g.r) * math.ceil(j / g.c) / g.h)


def matmul_cycles(mode: Mode, j: int, k: int, l: int, g: EngineGeometry, batch: int = 1) -> int:
    compute, drain = pass_cycles(mode, k, g)
    return pass_count(mode, j, l, g, batch) * (compute + drain)


# -- bank addressing ---------------------------------------------------------

@dataclass(frozen=True)
class BankAccess:
    bank: int
    address: int
    routing: Routing
    lanes: tuple


def bank_address(mode: Mode, geometry: EngineGeometry, column: int, cycle: int, head: int = 0) -> BankAccess:
    """Input-memory access feeding ``column`` of array ``head`` at ``cycle``.

    Bank ``column`` is read at address ``cycle - column`` (the column skew).  In
    dense mode a word stacks ``n`` elements of each of the ``h`` tiles and head
    ``e`` picks lanes ``[e*n, (e+1)*n)``; in sparse mode the whole m-element
    word is broadcast to every head.
    """
    g = geometry
    if not 0 <= column < g.c:
        raise ValueError(f"column {column} outside 0..{g.c - 1}")
    if not 0 <= head < g.h:
        raise ValueError(f"head {head} outside 0..{g.h - 1}")
    address = cycle - column
    if address < 0:
        raise ValueError(f"bank {column} starts streaming at cycle {column}")
    if mode is Mode.SPARSE_DENSE:
        return BankAccess(column, address, Routing.BROADCAST, (0, g.nm.m))
    n = g.nm.n
    routing = Routing.DIRECT if head == 0 else Routing.MUX_SELECT
    return BankAccess(column, address, routing, (head * n, (head + 1) * n))


def stack_bank_words(north_tiles: np.ndarray) -> np.ndarray:
    """Dense-mode input layout: ``(h, c, S, n)`` tiles -> ``(c, S, h*n)`` bank words."""
    h, c, s, n = north_tiles.shape
    return north_tiles.transpose(1, 2, 0, 3).reshape(c, s, h * n)


# -- trace -------------------------------------------------------------------

TRACE_FIELDS = ("active", "macs", "weight_reads", "input_reads", "selector_ops")


@dataclass
class CycleTrace:
    """Per-cycle engine activity.  With ``keep_cycles=False`` only totals are kept."""

    keep_cycles: bool = True
    total_cycles: int = 0
    compute_cycles: int = 0
    drain_cycles: int = 0
    passes: int = 0
    overflow_count: int = 0
    totals: dict = field(default_factory=lambda: dict.fromkeys(TRACE_FIELDS, 0))
    max_per_cycle: dict = field(default_factory=lambda: dict.fromkeys(TRACE_FIELDS, 0))
    _chunks: list = field(default_factory=list, repr=False)

    def add_pass(self, counters: np.ndarray, drain: int, overflow: int):
        compute = counters.shape[1]
        self.passes += 1
        self.compute_cycles += compute
        self.drain_cycles += drain
        self.total_cycles += compute + drain
        self.overflow_count += overflow
        for idx, name in enumerate(TRACE_FIELDS):
            row = counters[idx]
            self.totals[name] += int(row.sum())
            if compute:
                self.max_per_cycle[name] = max(self.max_per_cycle[name], int(row.max()))
        if self.keep_cycles:
            phase = np.concatenate([np.zeros(compute, np.int64), np.ones(drain, np.int64)])
            body = np.concatenate([counters, np.zeros((len(TRACE_FIELDS), drain), np.int64)], axis=1)
            self._chunks.append(np.vstack([phase[None], body]))

    def merge(self, other: "CycleTrace"):
        self.total_cycles += other.total_cycles
        self.compute_cycles += other.compute_cycles
        self.drain_cycles += other.drain_cycles
        self.passes += other.passes
        self.overflow_count += other.overflow_count
        for name in TRACE_FIELDS:
            self.totals[name] += other.totals[name]
            self.max_per_cycle[name] = max(self.max_per_cycle[name], other.max_per_cycle[name])
        if self.keep_cycles:
            self._chunks.extend(other._chunks)

    @property
    def total_macs(self) -> int:
        return self.totals["macs"]

    def table(self) -> np.ndarray:
        """``(cycles, 6)`` array: phase (0 compute, 1 drain) then TRACE_FIELDS."""
        if not self.keep_cycles:
            raise ValueError("trace was recorded without per-cycle data")
        if not self._chunks:
            return np.zeros((0, 1 + len(TRACE_FIELDS)), np.int64)
        return np.hstack(self._chunks).T

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, 1 + TRACE_FIELDS.index(name)]

    def write_csv(self, path):
        tab = self.table()
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["cycle", "macs", "weight_reads", "input_reads", "selector_ops"])
            for cyc, row in enumerate(tab):
                out.writerow([cyc, row[2], row[3], row[4], row[5]])

    def summary(self) -> dict:
        return {"total_cycles": self.total_cycles, "total_macs": self.total_macs,
                "overflow_count": self.overflow_count}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


@dataclass
class MatmulResult:
    result: np.ndarray
    trace: CycleTrace


# -- scheduling --------------------------------------------------------------

def _check_operand(a: np.ndarray, name: str):
    lo, hi = -(1 << (PE_OPERAND_BITS - 1)), (1 << (PE_OPERAND_BITS - 1)) - 1
    if a.size and (a.min() < lo or a.max() > hi):
        raise ValueError(f"{name} does not fit the PE's {PE_OPERAND_BITS}-bit operand registers")


def _pad_axis(a: np.ndarray, axis: int, size: int) -> np.ndarray:
    if a.shape[axis] == size:
        return a
    pad = [(0, 0)] * a.ndim
    pad[axis] = (0, size - a.shape[axis])
    return np.pad(a, pad)


def run_matmul(mode: Mode, a, b, geometry: EngineGeometry, kernel=None,
               keep_cycles: bool = True) -> MatmulResult:
    """``a (J x K) @ b (K x L)`` on the engine; ``b`` is a CompressedMatrix in sparse mode."""
    mode = Mode(mode)
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("activations must be 2-D")
    if mode is Mode.SPARSE_DENSE:
        if not isinstance(b, CompressedMatrix):
            raise TypeError("sparse-dense mode takes a CompressedMatrix")
        return _run_sparse(a, b, geometry, kernel, keep_cycles)
    if isinstance(b, CompressedMatrix):
        from ..nmformat import decompress
        b = decompress(b)
    res = run_dense_batch(a[None], np.asarray(b)[None], geometry, kernel, keep_cycles)
    return MatmulResult(res.result[0], res.trace)


def _run_sparse(a, w: CompressedMatrix, g: EngineGeometry, kernel, keep_cycles) -> MatmulResult:
    nm = g.nm
    if (w.config.n, w.config.m) != (nm.n, nm.m):
        raise GeometryMismatch(f"weights are {w.config}, engine is built for {nm}")
    if w.group_axis != 0:
        raise GeometryMismatch("weights must be grouped along the reduction axis (rows)")
    if w.config.q > PE_OPERAND_BITS:
        raise ValueError(f"q={w.config.q} weights exceed the {PE_OPERAND_BITS}-bit datapath")
    jdim, kdim = a.shape
    if kdim != w.rows:
        raise GeometryMismatch(f"activation K={kdim} but weights have {w.rows} rows")
    _check_operand(a, "activations")
    ldim, steps = w.cols, w.groups_per_line
    masks, values = w.group_grid()  # (G, L), (G, L, n)
    counts = mask_bits(masks, nm.m).sum(axis=-1).ravel()
    over = np.flatnonzero(counts > nm.n)
    if over.size:
        raise PatternViolation(int(over[0]), int(counts[over[0]]), nm.n)
    kernel = kernel or backend.run_pass
    h, r, c = g.h, g.r, g.c
    l_tiles, j_tiles = math.ceil(ldim / (h * r)), math.ceil(jdim / c)
    lp, jp = l_tiles * h * r, j_tiles * c
    # west side: (L_padded, G, n) values and (L_padded, G) masks
    wv = _pad_axis(values.transpose(1, 0, 2), 0, lp).astype(np.int32)
    wm = _pad_axis(masks.T, 0, lp).astype(np.uint64)
    # north side: (J_padded, G, m) activation groups
    act = _pad_axis(_pad_axis(a.astype(np.int32), 1, steps * nm.m), 0, jp).reshape(jp, steps, nm.m)
    row_ok = (np.arange(lp) < ldim).astype(np.uint8)
    col_ok = (np.arange(jp) < jdim).astype(np.uint8)
    out = np.zeros((jp, lp), dtype=np.int32)
    trace = CycleTrace(keep_cycles)
    for jt in range(j_tiles):
        js = slice(jt * c, (jt + 1) * c)
        north = np.ascontiguousarray(act[js][None])
        cv = np.ascontiguousarray(np.broadcast_to(col_ok[js], (h, c)))
        for lt in range(l_tiles):
            ls = slice(lt * h * r, (lt + 1) * h * r)
            psum, counters, over = kernel(
                True,
                np.ascontiguousarray(wv[ls].reshape(h, r, steps, nm.n)),
                np.ascontiguousarray(wm[ls].reshape(h, r, steps)),
                north,
                np.ascontiguousarray(row_ok[ls].reshape(h, r)),
                cv, nm.m)
            trace.add_pass(counters, drain_cycles(g), over)
            out[js, ls] = psum.reshape(h * r, c).T
    return MatmulResult(out[:jdim, :ldim], trace)


def run_dense_batch(a, b, geometry: EngineGeometry, kernel=None, keep_cycles: bool = True) -> MatmulResult:
    """Independent dense products ``a[x] (J x K) @ b[x] (K x L)``, one output tile per array.

    Tiles are enumerated token-tile outer, feature-tile next and batch inner,
    and consecutive groups of ``h`` tiles share a pass.
    """
    g = geometry
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise GeometryMismatch(f"cannot multiply batches {a.shape} and {b.shape}")
    _check_operand(a, "left operand")
    _check_operand(b, "right operand")
    kernel = kernel or backend.run_pass
    batch, jdim, kdim = a.shape
    ldim = b.shape[2]
    n, h, r, c = g.nm.n, g.h, g.r, g.c
    steps = math.ceil(kdim / n)
    l_tiles, j_tiles = math.ceil(ldim / r), math.ceil(jdim / c)
    lp, jp = l_tiles * r, j_tiles * c
    kp = steps * n
    west = _pad_axis(_pad_axis(b.transpose(0, 2, 1).astype(np.int32), 2, kp), 1, lp)
    west = west.reshape(batch, lp, steps, n)
    north = _pad_axis(_pad_axis(a.astype(np.int32), 2, kp), 1, jp).reshape(batch, jp, steps, n)
    row_ok = np.arange(lp) < ldim
    col_ok = np.arange(jp) < jdim
    jobs = [(x, lt, jt) for jt in range(j_tiles) for lt in range(l_tiles) for x in range(batch)]
    out = np.zeros((batch, jp, lp), dtype=np.int32)
    trace = CycleTrace(keep_cycles)
    no_masks = np.zeros((h, r, steps), dtype=np.uint64)
    for p in range(0, len(jobs), h):
        group = jobs[p:p + h]
        wv = np.zeros((h, r, steps, n), np.int32)
        nv = np.zeros((h, c, steps, n), np.int32)
        rv = np.zeros((h, r), np.uint8)
        cv = np.zeros((h, c), np.uint8)
        for e, (x, lt, jt) in enumerate(group):
            ls, js = slice(lt * r, (lt + 1) * r), slice(jt * c, (jt + 1) * c)
            wv[e], nv[e] = west[x, ls], north[x, js]
            rv[e], cv[e] = row_ok[ls], col_ok[js]
        psum, counters, over = kernel(False, wv, no_masks, nv, rv, cv, g.nm.m)
        trace.add_pass(counters, drain_cycles(g), over)
        for e, (x, lt, jt) in enumerate(group):
            out[x, jt * c:(jt + 1) * c, lt * r:(lt + 1) * r] = psum[e].T
    return MatmulResult(out[:, :jdim, :ldim], trace)


def drain_results(engine) -> np.ndarray:
    """Shift a :class:`~stasim.dmme.pe.ReferenceEngine`'s results out east (``c`` cycles)."""
    return engine.drain()
