# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled cycle loop for one DMME tile pass (see _kernels_py for the reference semantics)."""

import numpy as np
from libc.stdint cimport int32_t, int64_t, uint8_t, uint64_t

cdef extern from *:
    int __builtin_ctzll(unsigned long long x) nogil


cdef inline int64_t _wrap32(int64_t v) nogil:
    return <int64_t>(<int32_t>(<uint64_t>v & 0xFFFFFFFFULL))


def run_pass(bint sparse,
             const int32_t[:, :, :, ::1] west_vals,
             const uint64_t[:, :, ::1] west_masks,
             const int32_t[:, :, :, ::1] north,
             const uint8_t[:, ::1] row_valid,
             const uint8_t[:, ::1] col_valid,
             int m):
    cdef Py_ssize_t h = west_vals.shape[0], r = west_vals.shape[1]
    cdef Py_ssize_t steps = west_vals.shape[2], n = west_vals.shape[3]
    cdef Py_ssize_t c = north.shape[1]
    cdef bint broadcast = north.shape[0] == 1
    cdef Py_ssize_t cycles = steps + r + c - 2
    psum_arr = np.zeros((h, r, c), dtype=np.int64)
    counters_arr = np.zeros((5, cycles), dtype=np.int64)
    cdef int64_t[:, :, ::1] psum = psum_arr
    cdef int64_t[:, ::1] cnt = counters_arr
    cdef Py_ssize_t t, e, i, j, k, s, hn
    cdef int64_t acc, wrapped, overflow = 0
    cdef uint64_t mask, low
    cdef int pos
    cdef int64_t active, wreads, ireads
    with nogil:
        for t in range(cycles):
            active = 0
            wreads = 0
            ireads = 0
            for e in range(h):
                hn = 0 if broadcast else e
                for i in range(r):
                    if not row_valid[e, i]:
                        continue
                    s = t - i
                    if 0 <= s < steps:
                        wreads += n
                    for j in range(c):
                        s = t - i - j
                        if s < 0 or s >= steps or not col_valid[e, j]:
                            continue
                        acc = psum[e, i, j]
                        if sparse:
                            mask = west_masks[e, i, s]
                            for k in range(n):
                                if mask == 0:
                                    break
                                low = mask & (~mask + 1)
                                pos = __builtin_ctzll(low)
                                acc += <int64_t>west_vals[e, i, s, k] * north[hn, j, s, pos]
                                mask ^= low
                        else:
                            for k in range(n):
                                acc += <int64_t>west_vals[e, i, s, k] * north[hn, j, s, k]
                        wrapped = _wrap32(acc)
                        if wrapped != acc:
                            overflow += 1
                        psum[e, i, j] = wrapped
                        active += 1
            for j in range(c):
                s = t - j
                if s < 0 or s >= steps:
                    continue
                if sparse:
                    if col_valid[0, j]:
                        ireads += m
                else:
                    for e in range(h):
                        if col_valid[e, j]:
                            ireads += n
            cnt[0, t] = active
            cnt[1, t] = active * n
            cnt[2, t] = wreads
            cnt[3, t] = ireads
            cnt[4, t] = active if sparse else 0
    return psum_arr.astype(np.int32), counters_arr, overflow
