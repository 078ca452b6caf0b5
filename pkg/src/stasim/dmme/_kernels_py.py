"""Numpy implementation of one DMME tile pass, stepped cycle by cycle.

At cycle ``t`` the PE in row ``i`` and column ``j`` holds stream step
``t - i - j``: the western operand entered row ``i`` at ``t - j`` after an
``i``-cycle skew, the northern one entered column ``j`` at ``t - i``.

Returns ``(psum, counters, overflow)`` where ``counters`` rows are active
PEs, MACs issued, weight elements read, input elements read and selector
activations, one column per cycle.
"""

import numpy as np

_WRAP = np.int64(1 << 32)
_HALF = np.int64(1 << 31)


def _wrap32(v):
    return ((v + _HALF) % _WRAP) - _HALF


def _lowest_bit_index(low):
    # low is a power of two (or zero); float64 represents 2**k exactly up to k = 63
    return np.log2(np.maximum(low, 1).astype(np.float64)).astype(np.int64)


def run_pass(sparse, west_vals, west_masks, north, row_valid, col_valid, m):
    h, r, steps, n = west_vals.shape
    c = north.shape[1]
    broadcast = north.shape[0] == 1
    cycles = steps + r + c - 2
    psum = np.zeros((h, r, c), dtype=np.int64)
    counters = np.zeros((5, cycles), dtype=np.int64)
    overflow = 0
    skew = np.add.outer(np.arange(r), np.arange(c))
    row_ok = row_valid.astype(bool)
    col_ok = col_valid.astype(bool)
    pe_ok = row_ok[:, :, None] & col_ok[:, None, :]
    w64 = west_vals.astype(np.int64)
    n64 = north.astype(np.int64)
    one = np.uint64(1)
    for t in range(cycles):
        s_grid = t - skew
        live = pe_ok & ((s_grid >= 0) & (s_grid < steps))[None]
        e, i, j = np.nonzero(live)
        s = s_grid[i, j]
        if e.size:
            w = w64[e, i, s]
            hn = np.zeros_like(e) if broadcast else e
            if sparse:
                mask = west_masks[e, i, s].copy()
                data = np.zeros((e.size, n), dtype=np.int64)
                for k in range(n):
                    low = mask & (~mask + one)
                    pos = _lowest_bit_index(low)
                    data[:, k] = np.where(low != 0, n64[hn, j, s, pos], 0)
                    mask ^= low
            else:
                data = n64[hn, j, s]
            wide = psum[e, i, j] + (w * data).sum(axis=1)
            wrapped = _wrap32(wide)
            overflow += int(np.count_nonzero(wrapped != wide))
            psum[e, i, j] = wrapped
        steps_in = (t - np.arange(r) >= 0) & (t - np.arange(r) < steps)
        cols_in = (t - np.arange(c) >= 0) & (t - np.arange(c) < steps)
        counters[0, t] = e.size
        counters[1, t] = e.size * n
        counters[2, t] = np.count_nonzero(row_ok & steps_in[None]) * n
        if sparse:
            counters[3, t] = np.count_nonzero(col_ok[0] & cols_in) * m
            counters[4, t] = e.size
        else:
            counters[3, t] = np.count_nonzero(col_ok & cols_in[None]) * n
    return psum.astype(np.int32), counters, overflow
