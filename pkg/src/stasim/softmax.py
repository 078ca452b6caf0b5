"""Bit-accurate model of the scalable softmax unit.

Inputs are signed fixed-point integers with ``frac_bits`` fractional bits,
clamped to ``[x_min, 0]``.  The exponent of ``x = base + rem`` is
``lut[base] * (1 + rem)`` with the LUT holding ``exp(base)`` in Q.16, which
costs one multiplier and one adder.  The sum of exponents is kept exactly
and every output is a ``q_out``-bit fraction from a restoring divider.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidConfig

EXP_FRAC = 16  # fractional bits of the exponent unit's output


@dataclass(frozen=True)
class SoftmaxConfig:
    p: int = 8
    q_out: int = 16
    lut_bits: int = 6
    frac_bits: int = 10
    range_bits: int = 3  # LUT spans 2**range_bits input units below zero
    max_subtract: bool = False

    def __post_init__(self):
        if self.p < 1:
            raise InvalidConfig("softmax parallelism p must be >= 1")
        if not 4 <= self.q_out <= 16:
            raise InvalidConfig("q_out must lie in 4..16")
        if self.seg_shift < 0:
            raise InvalidConfig("lut_bits too large for the input range and fraction")

    @property
    def seg_shift(self) -> int:
        """log2 of the segment width in raw input units."""
        return self.frac_bits + self.range_bits - self.lut_bits

    @property
    def x_min_raw(self) -> int:
        # top LUT entry sits exactly on 0, so x = 0 needs no Taylor correction
        return -((1 << self.lut_bits) - 1) << self.seg_shift

    @property
    def x_min(self) -> float:
        return self.x_min_raw / (1 << self.frac_bits)

    @cached_property
    def lut(self) -> "ExpLut":
        return ExpLut.build(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SoftmaxConfig":
        keys = {"p", "q_out", "lut_bits", "frac_bits", "range_bits", "max_subtract"}
        return cls(**{k: v for k, v in data.items() if k in keys})


@dataclass(frozen=True, eq=False)
class ExpLut:
    bases: np.ndarray   # segment bases, real values
    entries: np.ndarray  # round(exp(base) * 2**EXP_FRAC)

    @classmethod
    def build(cls, cfg: SoftmaxConfig) -> "ExpLut":
        k = np.arange(1 << cfg.lut_bits)
        bases = (cfg.x_min_raw + (k << cfg.seg_shift)) / (1 << cfg.frac_bits)
        entries = np.rint(np.exp(bases) * (1 << EXP_FRAC)).astype(np.int64)
        return cls(bases, entries)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["index", "base", "entry"])
            for i, (b, e) in enumerate(zip(self.bases, self.entries)):
                out.writerow([i, f"{b:.6f}", int(e)])


def to_fixed(x, frac_bits: int = 10) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=float) * (1 << frac_bits)), -32768, 32767).astype(np.int64)


def exp_approx(x, config: SoftmaxConfig = SoftmaxConfig()) -> np.ndarray:
    """Q.16 exponent of raw fixed-point ``x`` (array or scalar), saturating below ``x_min``."""
    cfg = config
    raw = np.clip(np.asarray(x, dtype=np.int64), cfg.x_min_raw, 0)
    u = raw - cfg.x_min_raw
    idx = u >> cfg.seg_shift
    rem = u & ((1 << cfg.seg_shift) - 1)
    return (cfg.lut.entries[idx] * ((1 << cfg.frac_bits) + rem)) >> cfg.frac_bits


def exp_relative_bound(x, config: SoftmaxConfig = SoftmaxConfig()) -> np.ndarray:
    """Worst-case ``|exp_approx - exp| / exp`` for in-range raw inputs.

    Two terms: the first-order Taylor gap ``(e^r - 1 - r) / e^r`` at the
    in-segment remainder ``r``, and the LUT rounding (half an LSB, scaled by
    ``1 + r``) plus output truncation (one LSB) relative to ``exp(x)``.
    """
    cfg = config
    raw = np.clip(np.asarray(x, dtype=np.int64), cfg.x_min_raw, 0)
    rem = ((raw - cfg.x_min_raw) & ((1 << cfg.seg_shift) - 1)) / (1 << cfg.frac_bits)
    xv = raw / (1 << cfg.frac_bits)
    taylor = (np.exp(rem) - 1.0 - rem) / np.exp(rem)
    rounding = (0.5 * (1.0 + rem) + 1.0) / (np.exp(xv) * (1 << EXP_FRAC))
    return taylor + rounding


def pipelined_divide(numerator: int, denominator: int, q_out: int) -> int:
    """Restoring shift-subtract division giving a ``q_out``-bit truncated fraction.

    One quotient bit per stage.  ``x / x`` yields all ones, the largest
    representable fraction below 1.
    """
    num, den = int(numerator), int(denominator)
    if den <= 0:
        raise ZeroDivisionError("denominator must be positive")
    if not 0 <= num <= den:
        raise ValueError("need 0 <= numerator <= denominator")
    rem, quo = num, 0
    for _ in range(q_out):
        rem <<= 1
        quo <<= 1
        if rem >= den:
            rem -= den
            quo |= 1
    return quo


def _divide_stage(rem, quo, den):
    rem = rem << 1
    quo = quo << 1
    take = rem >= den
    return np.where(take, rem - den, rem), quo | take


class PipelinedDivider:
    """``q`` cascaded subtract/shift stages, ``p`` lanes wide, one stage per cycle."""

    def __init__(self, p: int, q: int):
        self.p, self.q = p, q
        self.stages = [None] * q

    def clock(self, issue):
        """Advance one cycle; ``issue`` is ``(index, num, den)`` arrays or None. Returns finished."""
        done = self.stages[-1]
        for k in range(self.q - 1, 0, -1):
            prev = self.stages[k - 1]
            self.stages[k] = None if prev is None else (prev[0], *_divide_stage(prev[1], prev[2], prev[3]), prev[3])
        if issue is None:
            self.stages[0] = None
        else:
            idx, num, den = issue
            self.stages[0] = (idx, *_divide_stage(num, np.zeros_like(num), den), den)
        return None if done is None else (done[0], done[2])

    @property
    def busy(self) -> bool:
        return any(s is not None for s in self.stages)


@dataclass
class SoftmaxResult:
    values: np.ndarray
    cycles: int
    exponents: np.ndarray
    total: int
    phase_cycles: dict = field(default_factory=dict)
    buffer_peak: int = 0
    intermediate_accesses: int = 0  # off-unit traffic; stays 0, the buffer is local


def _prepare(x, cfg: SoftmaxConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if cfg.max_subtract:
        x = x - x.max(axis=-1, keepdims=True)
    return x


def softmax_vector(x, length: int | None = None, config: SoftmaxConfig = SoftmaxConfig()) -> SoftmaxResult:
    """Stream one vector through the unit cycle by cycle."""
    cfg = config
    x = _prepare(x, cfg)
    if length is not None:
        x = x[:length]
    n = x.size
    if n < 1:
        raise ValueError("softmax needs at least one element")
    p, q = cfg.p, cfg.q_out
    buffer = np.zeros(n, dtype=np.int64)
    total = 0
    stream = 0
    # exponent streaming with the accumulator running alongside
    for start in range(0, n, p):
        lanes = exp_approx(x[start:start + p], cfg)
        buffer[start:start + p] = lanes
        total += int(lanes.sum())
        stream += 1
    div = PipelinedDivider(p, q)
    out = np.zeros(n, dtype=np.int64)
    divide = 0
    nxt = 0
    while nxt < n or div.busy:
        issue = None
        if nxt < n:
            idx = np.arange(nxt, min(nxt + p, n))
            issue = (idx, buffer[idx], np.full(idx.size, total, dtype=np.int64))
            nxt += p
        done = div.clock(issue)
        divide += 1
        if done is not None:
            out[done[0]] = done[1]
    # the clock that retires the last word is the one after it leaves stage q-1
    return SoftmaxResult(out, stream + divide, buffer, total,
                         {"stream": stream, "divide": divide}, buffer_peak=n)


def softmax_cycles(length: int, config: SoftmaxConfig) -> int:
    t = math.ceil(length / config.p)
    return t + config.q_out + t


def softmax_rows(x, config: SoftmaxConfig = SoftmaxConfig(), lengths=None):
    """Vectorised functional model over the rows of ``x``; returns ``(values, cycles)``.

    ``lengths[i]`` limits row ``i`` to its first entries (causal rows); outputs
    beyond a row's length are zero.
    """
    cfg = config
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    rows, width = x.shape
    lengths = np.full(rows, width) if lengths is None else np.asarray(lengths)
    live = np.arange(width)[None, :] < lengths[:, None]
    if cfg.max_subtract:
        x = x - np.where(live, x, np.iinfo(np.int64).min).max(axis=1, keepdims=True)
    e = np.where(live, exp_approx(x, cfg), 0)
    total = e.sum(axis=1, keepdims=True)
    rem, quo = e, np.zeros_like(e)
    for _ in range(cfg.q_out):
        rem, quo = _divide_stage(rem, quo, total)
    cycles = int(sum(softmax_cycles(int(n), cfg) for n in lengths))
    return np.where(live, quo, 0), cycles


def softmax_error_bound(x, config: SoftmaxConfig = SoftmaxConfig()) -> np.ndarray:
    """Per-element bound on ``|out * 2**-q_out - softmax(x)|`` for in-range inputs.

    With relative exponent errors ``d_i`` (bounded by :func:`exp_relative_bound`)
    and ``D = sum(sigma_j * bound_j)``, the ratio error is at most
    ``sigma_i * (bound_i + D) / (1 - D)``; the divider adds less than one LSB.
    """
    cfg = config
    x = _prepare(x, cfg)
    xr = np.clip(x, cfg.x_min_raw, 0) / (1 << cfg.frac_bits)
    sigma = np.exp(xr - xr.max())
    sigma /= sigma.sum()
    d = exp_relative_bound(x, cfg)
    big_d = float((sigma * d).sum())
    return sigma * (d + big_d) / (1.0 - big_d) + 2.0 ** -cfg.q_out
