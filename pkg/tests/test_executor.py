import math

import numpy as np
import pytest

from stasim.compiler import (FLAG_CAUSAL, FusedOp, FusedVector, Load, MatMul, MemoryConfig, ModelConfig, Store,
                             build_ir, lower, preset)
from stasim.dmme.engine import EngineGeometry, Mode
from stasim.errors import DimMismatch
from stasim.executor import (ACT_FRAC, ModelWeights, StaSimulator, check_inputs, dequantize, gelu, layer_norm,
                             reference_forward, requantize, synthetic_inputs)
from stasim.nmformat import NmConfig, decompress
from stasim.report import ProgramInvalid, simulate
from stasim.softmax import SoftmaxConfig

TINY = ModelConfig(1, 1, 16, 2, 32, 64)
NM = NmConfig(2, 4)


def oracle_matmul_cycles(ins: MatMul, g: EngineGeometry) -> int:
    """Closed form: passes times (steps + skew + drain)."""
    sparse = ins.mode is Mode.SPARSE_DENSE
    steps = math.ceil(ins.k / (g.nm.m if sparse else g.nm.n))
    token_tiles = math.ceil(ins.j / g.c)
    if sparse:
        passes = math.ceil(ins.l / (g.h * g.r)) * token_tiles
    else:
        passes = math.ceil(ins.heads * math.ceil(ins.l / g.r) * token_tiles / g.h)
    return passes * (steps + g.r + g.c - 2 + g.c)


def oracle_program_cycles(program, g: EngineGeometry, sm: SoftmaxConfig, lanes: int) -> int:
    total = 0
    for ins in program:
        if isinstance(ins, MatMul):
            total += oracle_matmul_cycles(ins, g)
        elif isinstance(ins, FusedVector) and ins.op is FusedOp.SOFTMAX:
            lengths = [r % ins.length + 1 if ins.flags & FLAG_CAUSAL else ins.length for r in range(ins.rows)]
            total += sum(2 * math.ceil(n / sm.p) + sm.q_out for n in lengths)
        elif isinstance(ins, FusedVector):
            total += math.ceil(ins.rows * ins.length / lanes)
    return total


def _setup(cfg=TINY, nm=NM, seed=0, mode="auto"):
    prog = lower(build_ir(cfg), nm, mode)
    return prog, ModelWeights.synthetic(prog, nm, seed), synthetic_inputs(prog, seed)


def test_requantize():
    assert requantize([5, 6, 7, -5, -6], 2).tolist() == [1, 2, 2, -1, -1]
    assert requantize([1 << 30, -(1 << 30)], 4).tolist() == [32767, -32768]
    assert requantize([3], -2).tolist() == [12]
    assert requantize([3], 0).tolist() == [3]


def test_float_helpers():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(gelu(np.array(3.0)) - 3.0) < 0.01
    y = layer_norm(np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert abs(y.mean()) < 1e-12 and abs(y.std() - 1) < 1e-4


def test_synthetic_weights_are_nm():
    prog, w, _ = _setup()
    for wid in prog.weight_ids():
        c = w.compressed(wid)
        assert np.array_equal(decompress(c), w.weights[wid])
        assert w.biases[wid].shape == (prog.tensors[wid].shape[1],)


def test_end_to_end_matches_reference():
    prog, w, x = _setup()
    sim = StaSimulator(EngineGeometry(2, 4, 4, NM), check=True)
    res = sim.run(prog, w, x)
    ref = reference_forward(prog, w, x)
    out = prog.outputs[0]
    assert res.outputs[out].shape == (16, 32)
    assert np.abs(dequantize(res.outputs[out]) - ref[out]).max() < 0.05
    assert res.overflow_count == 0


def test_shallow_end_to_end(kernel):
    prog, w, x = _setup(preset("shallow_transformer"), NmConfig(2, 8))
    res = StaSimulator(EngineGeometry.default(NmConfig(2, 8)), kernel=kernel).run(prog, w, x)
    ref = reference_forward(prog, w, x)
    out = prog.outputs[0]
    assert np.abs(dequantize(res.outputs[out]) - ref[out]).max() < 0.05


def test_sparse_and_dense_bit_identical(kernel):
    g = EngineGeometry(2, 4, 4, NM)
    prog, w, x = _setup()
    dense_prog = lower(build_ir(TINY), NM, "dense")
    a = StaSimulator(g, kernel=kernel, check=True).run(prog, w, x)
    b = StaSimulator(g, kernel=kernel, check=True).run(dense_prog, w, x)
    out = prog.outputs[0]
    assert np.array_equal(a.outputs[out], b.outputs[out])
    for name, val in a.values.items():
        assert np.array_equal(val, b.values[name]), name


@pytest.mark.parametrize("geom", [(2, 4, 4), (2, 3, 5), (2, 16, 8), (2, 1, 1)])
def test_cycles_match_oracle(geom):
    g = EngineGeometry(*geom, NM)
    for mode in ("auto", "dense"):
        prog, w, x = _setup(mode=mode)
        sim = StaSimulator(g)
        res = sim.run(prog, w, x)
        assert res.total_cycles == oracle_program_cycles(prog, g, sim.softmax, sim.vector_lanes)
        cyc = StaSimulator(g, functional=False).run(prog)
        assert cyc.total_cycles == res.total_cycles


def test_block_breakdown():
    prog, w, x = _setup()
    res = StaSimulator(EngineGeometry(2, 4, 4, NM)).run(prog, w, x)
    assert [b.name for b in res.blocks] == ["enc0.mha", "enc0.ffn", "dec0.self", "dec0.cross", "dec0.ffn"]
    assert all(b.softmax_cycles == 0 for b in res.blocks if b.kind == "ffn")
    assert all(b.softmax_cycles > 0 for b in res.blocks if b.kind == "mha")
    assert res.total_cycles == sum(b.matmul_cycles + b.softmax_cycles + b.vector_cycles for b in res.blocks)


def test_bytes_moved():
    prog, w, x = _setup()
    res = StaSimulator(EngineGeometry(2, 4, 4, NM), functional=False).run(prog)
    loads = sum(i.bytes for i in prog if isinstance(i, Load))
    stores = sum(i.bytes for i in prog if isinstance(i, Store))
    assert res.bytes_moved["weight"] == loads
    assert res.bytes_moved["offchip"] == loads + stores
    assert res.bytes_moved["input"] == 2 * 16 * 32 * 2 + stores


def test_functional_needs_data():
    prog, _, _ = _setup()
    with pytest.raises(ValueError):
        StaSimulator(EngineGeometry(2, 4, 4, NM)).run(prog)


def test_check_inputs():
    prog, _, x = _setup()
    check_inputs(prog, x)
    with pytest.raises(DimMismatch):
        check_inputs(prog, {**x, "src": x["src"][:3]})
    with pytest.raises(DimMismatch):
        check_inputs(prog, {})


def test_inputs_quantized():
    prog, _, x = _setup()
    assert set(x) == {"src", "tgt"}
    assert x["src"].dtype == np.int64
    assert np.abs(x["src"]).max() < 8 << ACT_FRAC


def test_decoder_only_model():
    cfg = ModelConfig(0, 1, 8, 2, 16, 32)
    prog, w, x = _setup(cfg)
    assert prog.inputs == ["tgt", "mem"]
    res = StaSimulator(EngineGeometry(2, 4, 4, NM)).run(prog, w, x)
    ref = reference_forward(prog, w, x)
    assert np.abs(dequantize(res.outputs[prog.outputs[0]]) - ref[prog.outputs[0]]).max() < 0.05


def test_simulate_report(tmp_path):
    r = simulate(preset("shallow_transformer"), NmConfig(2, 8))
    assert r.dense_macs > 0 and r.sparse_macs > 0
    assert 1.0 < r.speedup <= 4.0
    assert r.reference_max_abs_error < 0.05
    assert r.config["geometry"] == "4x16x8"
    d = r.as_dict()
    assert d["speedup"] == r.speedup
    r.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0].startswith("name,kind,cycles")
    dense = simulate(preset("shallow_transformer"), NmConfig(2, 8), mode="dense", functional=False)
    assert dense.total_cycles == dense.baseline_cycles == r.baseline_cycles
    assert dense.sparse_macs == 0 and dense.compression_ratio == 1.0


def test_simulate_rejects_small_memory():
    with pytest.raises(ProgramInvalid) as exc:
        simulate(TINY, NM, functional=False, memory=MemoryConfig(weight_bytes=100))
    assert exc.value.diagnostics[0].code == "capacity"


def test_seed_determinism():
    a = simulate(TINY, NM, EngineGeometry(2, 4, 4, NM), seed=3)
    b = simulate(TINY, NM, EngineGeometry(2, 4, 4, NM), seed=3)
    assert a.as_dict() == b.as_dict()


def test_sparser_pattern_is_faster():
    cfg = preset("tinybert4")
    c18 = simulate(cfg, NmConfig(1, 8), functional=False).total_cycles
    c28 = simulate(cfg, NmConfig(2, 8), functional=False).total_cycles
    assert c18 < c28
