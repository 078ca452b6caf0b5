"""Register-level model of the unified systolic PE and a reference H x R x C engine.

This is the literal model: every cycle each PE latches its western and
northern neighbours' operand registers and issues one N-wide dot product.
It is slow and exists to pin down the semantics the fast kernels reproduce.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import PatternViolation

INT32_MIN = -(1 << 31)


class PeMode(enum.Enum):
    IDLE = "idle"
    DENSE_DENSE = "dense_dense"
    SPARSE_DENSE = "sparse_dense"
    SHIFTING = "shifting"


def wrap32(value: int) -> int:
    return ((int(value) - INT32_MIN) & 0xFFFFFFFF) + INT32_MIN


def selector_decode(mask: int, m: int, n: int) -> list[int]:
    """Split an m-bit group mask into ``n`` one-hot selects, lowest set bit first.

    Each stage isolates the lowest set bit with ``x & -x`` and clears it with an
    XOR before handing the remainder to the next stage.
    """
    mask = int(mask)
    if mask < 0 or mask >> m:
        raise ValueError(f"mask {mask:#x} does not fit in {m} bits")
    count = bin(mask).count("1")
    if count > n:
        raise PatternViolation(0, count, n)
    out = []
    for _ in range(n):
        low = mask & -mask
        out.append(low)
        mask ^= low
    return out


def _mac(weights, data, psum: int) -> tuple[int, bool]:
    wide = int(psum) + sum(int(w) * int(d) for w, d in zip(weights, data))
    wrapped = wrap32(wide)
    return wrapped, wrapped != wide


def n_parallel_mac(weights, data, psum: int) -> int:
    """``psum + sum(w_i * d_i)`` with exact products and adder tree, wrapped to 32 bits."""
    return _mac(weights, data, psum)[0]


@dataclass
class PeState:
    psum: int = 0
    west_regs: tuple = ()
    north_regs: tuple = ()
    mask_reg: int = 0
    west_valid: bool = False
    north_valid: bool = False
    mode: PeMode = PeMode.IDLE


@dataclass
class CycleCounters:
    active: int = 0
    macs: int = 0
    weight_reads: int = 0
    input_reads: int = 0
    selector_ops: int = 0


class UnifiedPE:
    def __init__(self, n: int, m: int):
        self.n = n
        self.m = m
        self.state = PeState()
        self.overflows = 0

    def latch(self, west: tuple, mask: int, west_valid: bool, north: tuple, north_valid: bool):
        st = self.state
        st.west_regs, st.mask_reg, st.west_valid = west, mask, west_valid
        st.north_regs, st.north_valid = north, north_valid

    def compute(self, mode: PeMode) -> int:
        """Issue one dot product if both operands are valid; returns MACs issued."""
        st = self.state
        if not (st.west_valid and st.north_valid):
            st.mode = PeMode.IDLE
            return 0
        st.mode = mode
        if mode is PeMode.SPARSE_DENSE:
            selects = selector_decode(st.mask_reg, self.m, self.n)
            data = [st.north_regs[s.bit_length() - 1] if s else 0 for s in selects]
        else:
            data = st.north_regs
        st.psum, over = _mac(st.west_regs, data, st.psum)
        self.overflows += over
        return self.n

    def shift(self, from_west: int) -> int:
        """Shifting mode: hand the local result east and take the western one."""
        st = self.state
        st.mode = PeMode.SHIFTING
        out, st.psum = st.psum, from_west
        return out


@dataclass
class ReferenceEngine:
    """H parallel R x C arrays of :class:`UnifiedPE` driven from the banked input memory."""

    geometry: "object"
    pes: list = field(init=False)
    cycles: list = field(default_factory=list)

    def __post_init__(self):
        g = self.geometry
        self.pes = [[[UnifiedPE(g.nm.n, g.nm.m) for _ in range(g.c)] for _ in range(g.r)]
                    for _ in range(g.h)]

    @property
    def overflows(self) -> int:
        return sum(pe.overflows for head in self.pes for row in head for pe in row)

    def psums(self) -> np.ndarray:
        return np.array([[[pe.state.psum for pe in row] for row in head] for head in self.pes],
                        dtype=np.int64)

    def run_pass(self, sparse: bool, west_vals, west_masks, bank_words, row_valid, col_valid):
        """Stream one tile pass; ``bank_words[j][s]`` is the m-wide word at bank j, address s."""
        from .engine import Mode, Routing, bank_address

        g = self.geometry
        n = g.nm.n
        h, r, c = g.h, g.r, g.c
        steps = len(west_vals[0][0])
        mode = Mode.SPARSE_DENSE if sparse else Mode.DENSE_DENSE
        pe_mode = PeMode.SPARSE_DENSE if sparse else PeMode.DENSE_DENSE
        for pe in (p for head in self.pes for row in head for p in row):
            pe.state = PeState()
        zero_w, zero_n = (0,) * n, (0,) * (g.nm.m if sparse else n)
        for t in range(steps + r + c - 2):
            cnt = CycleCounters()
            # snapshot of last cycle's registers, so every PE latches old neighbour values
            prev = [[[(pe.state.west_regs, pe.state.mask_reg, pe.state.west_valid,
                       pe.state.north_regs, pe.state.north_valid) for pe in row] for row in head]
                    for head in self.pes]
            read_cols = set()
            for e in range(h):
                for i in range(r):
                    for j in range(c):
                        if j == 0:
                            s = t - i
                            ok = bool(row_valid[e][i]) and 0 <= s < steps
                            west = tuple(int(v) for v in west_vals[e][i][s]) if ok else zero_w
                            mask = int(west_masks[e][i][s]) if ok and sparse else 0
                            if ok:
                                cnt.weight_reads += n
                        else:
                            west, mask, ok = prev[e][i][j - 1][:3]
                        if i == 0:
                            s = t - j
                            nok = bool(col_valid[e][j]) and 0 <= s < steps
                            if nok:
                                acc = bank_address(mode, g, j, t, head=e)
                                lo, hi = acc.lanes
                                north = tuple(int(v) for v in bank_words[acc.bank][acc.address][lo:hi])
                                if acc.routing is Routing.BROADCAST:
                                    read_cols.add(j)
                                else:
                                    cnt.input_reads += hi - lo
                            else:
                                north = zero_n
                        else:
                            north, nok = prev[e][i - 1][j][3:]
                        pe = self.pes[e][i][j]
                        pe.latch(west, mask, ok, north, nok)
                        issued = pe.compute(pe_mode)
                        if issued:
                            cnt.active += 1
                            cnt.macs += issued
                            cnt.selector_ops += sparse
            cnt.input_reads += len(read_cols) * g.nm.m
            self.cycles.append(cnt)
        return self.psums()

    def drain(self):
        """Shift every row east ``c`` times; returns the drained ``(h, r, c)`` tile."""
        g = self.geometry
        tile = np.zeros((g.h, g.r, g.c), dtype=np.int64)
        for k in range(g.c):
            for e, head in enumerate(self.pes):
                for i, row in enumerate(head):
                    carry = 0
                    for pe in row:
                        carry = pe.shift(carry)
                    # the value leaving the east edge at shift k came from column c-1-k
                    tile[e, i, g.c - 1 - k] = carry
            self.cycles.append(CycleCounters())
        return tile
