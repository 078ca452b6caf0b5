import math

import numpy as np
import pytest

from stasim.errors import InvalidConfig
from stasim.softmax import (
    EXP_FRAC,
    PipelinedDivider,
    SoftmaxConfig,
    exp_approx,
    exp_relative_bound,
    pipelined_divide,
    softmax_cycles,
    softmax_error_bound,
    softmax_rows,
    softmax_vector,
    to_fixed,
)

CFG = SoftmaxConfig()


def double_softmax(raw, frac_bits=10):
    x = np.asarray(raw, dtype=float) / (1 << frac_bits)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_config_checks():
    for kw in (dict(p=0), dict(q_out=3), dict(q_out=17), dict(lut_bits=14)):
        with pytest.raises(InvalidConfig):
            SoftmaxConfig(**kw)
    assert SoftmaxConfig.from_dict({"p": 4, "q_out": 12, "other": 1}) == SoftmaxConfig(p=4, q_out=12)


def test_lut_shape_and_monotone():
    lut = CFG.lut
    assert lut.entries.size == 64
    assert (np.diff(lut.entries) > 0).all()
    assert lut.bases[-1] == 0.0 and lut.entries[-1] == 1 << EXP_FRAC
    assert CFG.x_min == -7.875


def test_lut_csv(tmp_path):
    CFG.lut.write_csv(tmp_path / "lut.csv")
    lines = (tmp_path / "lut.csv").read_text().splitlines()
    assert lines[0] == "index,base,entry"
    assert len(lines) == 65


def test_exp_at_zero_and_clamp():
    assert exp_approx(0) == 1 << EXP_FRAC
    assert exp_approx(CFG.x_min_raw - 1) == CFG.lut.entries[0]
    assert exp_approx(-(1 << 15)) == CFG.lut.entries[0]
    assert exp_approx(500) == 1 << EXP_FRAC


def test_exp_relative_error_within_bound():
    rng = np.random.default_rng(0)
    x = rng.integers(CFG.x_min_raw, 1, size=10_000)
    approx = exp_approx(x) / (1 << EXP_FRAC)
    exact = np.exp(x / 1024)
    rel = np.abs(approx - exact) / exact
    assert (rel <= exp_relative_bound(x)).all()


def test_exp_bound_exhaustive():
    x = np.arange(CFG.x_min_raw, 1)
    rel = np.abs(exp_approx(x) / (1 << EXP_FRAC) - np.exp(x / 1024)) / np.exp(x / 1024)
    assert (rel <= exp_relative_bound(x)).all()
    # the Taylor gap alone over a full segment of width 1/8
    w = 2.0 ** (CFG.seg_shift - CFG.frac_bits)
    assert exp_relative_bound(x).max() >= (math.exp(w) - 1 - w) / math.exp(w) * 0.9


def test_exp_rounds_toward_zero():
    # one-LSB truncation: the approximation never rounds up past the product
    x = np.arange(CFG.x_min_raw, 1)
    u = x - CFG.x_min_raw
    prod = CFG.lut.entries[u >> CFG.seg_shift] * (1024 + (u & 127))
    assert np.array_equal(exp_approx(x), prod // 1024)


def test_to_fixed():
    assert to_fixed([0.5, -1.0, 100.0]).tolist() == [512, -1024, 32767]


def test_divide_examples():
    assert pipelined_divide(1, 2, 8) == 0b10000000
    assert pipelined_divide(7, 7, 16) == 0xFFFF
    assert pipelined_divide(0, 5, 8) == 0
    with pytest.raises(ZeroDivisionError):
        pipelined_divide(1, 0, 8)
    with pytest.raises(ValueError):
        pipelined_divide(3, 2, 8)


def test_divide_matches_floor():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        den = int(rng.integers(1, 1 << 24))
        num = int(rng.integers(0, den + 1))
        q = int(rng.integers(4, 17))
        expect = (num << q) // den
        assert pipelined_divide(num, den, q) == min(expect, (1 << q) - 1)


def test_pipelined_divider_latency():
    div = PipelinedDivider(2, 5)
    out = div.clock((np.array([0, 1]), np.array([1, 3]), np.array([4, 4])))
    assert out is None
    cycles = 1
    while out is None:
        out = div.clock(None)
        cycles += 1
    assert cycles == 6
    assert out[1].tolist() == [pipelined_divide(1, 4, 5), pipelined_divide(3, 4, 5)]
    assert not div.busy


def test_constant_vector_uniform():
    for c in (0, -100, -4000, CFG.x_min_raw):
        r = softmax_vector([c] * 4)
        assert r.values.tolist() == [1 << 14] * 4
    r = softmax_vector([-7] * 3)
    assert np.abs(r.values - (1 << 16) / 3).max() <= 1


def test_single_element():
    assert softmax_vector([-123]).values.tolist() == [0xFFFF]
    assert softmax_vector([0], config=SoftmaxConfig(q_out=8)).values.tolist() == [0xFF]


def test_length_argument_and_errors():
    r = softmax_vector([0, 0, -5000, -5000], length=2)
    assert r.values.tolist() == [1 << 15, 1 << 15]
    with pytest.raises(ValueError):
        softmax_vector([])


def test_cycle_model_sweep():
    rng = np.random.default_rng(2)
    for length in (1, 2, 7, 8, 9, 63, 64, 65, 130):
        for p in (1, 3, 8, 16):
            for q in (4, 9, 16):
                cfg = SoftmaxConfig(p=p, q_out=q)
                r = softmax_vector(rng.integers(-8000, 1, size=length), config=cfg)
                t = math.ceil(length / p)
                assert r.cycles == softmax_cycles(length, cfg) == 2 * t + q
                assert r.phase_cycles["stream"] == t


def test_intermediates_stay_local():
    r = softmax_vector(np.arange(-640, 0, 10))
    assert r.intermediate_accesses == 0
    assert r.buffer_peak == 64
    assert r.total == int(r.exponents.sum())


def test_rows_match_vector():
    rng = np.random.default_rng(3)
    x = rng.integers(CFG.x_min_raw, 1, size=(20, 37))
    lengths = rng.integers(1, 38, size=20)
    values, cycles = softmax_rows(x, CFG, lengths)
    assert cycles == sum(softmax_cycles(int(n), CFG) for n in lengths)
    for row, n, v in zip(x, lengths, values):
        assert np.array_equal(v[:n], softmax_vector(row, int(n)).values)
        assert not v[n:].any()


def test_max_subtract_rows_match_vector():
    cfg = SoftmaxConfig(q_out=15, max_subtract=True)
    rng = np.random.default_rng(4)
    x = rng.integers(-20000, 20000, size=(6, 16))
    values, _ = softmax_rows(x, cfg, [16, 3, 8, 1, 16, 5])
    for row, n, v in zip(x, [16, 3, 8, 1, 16, 5], values):
        assert np.array_equal(v[:n], softmax_vector(row[:n], config=cfg).values)


def test_positive_and_monotone():
    rng = np.random.default_rng(5)
    x = rng.integers(CFG.x_min_raw, 1, size=(500, 64))
    values, _ = softmax_rows(x, CFG)
    assert (values > 0).all()
    order = np.argsort(x, axis=1)
    assert (np.diff(np.take_along_axis(values, order, axis=1), axis=1) >= 0).all()


def test_random_vectors_against_double():
    rng = np.random.default_rng(6)
    x = rng.integers(CFG.x_min_raw, 1, size=(2000, 64))
    values, _ = softmax_rows(x, CFG)
    err = np.abs(values / 2**16 - double_softmax(x))
    bound = np.stack([softmax_error_bound(row) for row in x])
    assert (err <= bound).all()
    sums = values.sum(axis=1) / 2**16
    assert (np.abs(sums - 1) <= 64 * 2.0 ** -16).all()


def test_shift_by_segment_within_bound():
    # shifting by whole segments keeps remainders; only LUT rounding differs
    rng = np.random.default_rng(7)
    for _ in range(200):
        x = rng.integers(-4 * 1024, 1, size=16)
        shift = 128 * int(rng.integers(1, 8))
        a = softmax_vector(x).values / 2**16
        b = softmax_vector(x - shift).values / 2**16
        slack = softmax_error_bound(x) + softmax_error_bound(x - shift)
        assert (np.abs(a - b) <= slack).all()
