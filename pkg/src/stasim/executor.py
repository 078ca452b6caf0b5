"""Top-level STA model: replays a compiled program on DMME, the softmax unit and the vector unit.

Number formats on chip: activations int16 with ACT_FRAC fractional bits,
weights and biases int16 with WEIGHT_FRAC, softmax outputs are q_out-bit
fractions.  MatMul results leave the engine as int32 and are requantised to
activations on write-back.  The vector unit works in floating point and
requantises its result; it is functional only apart from its cycle count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .compiler import (ACT_BYTES, FLAG_CAUSAL, FLAG_LAYER_NORM, SCALE_ONE, FusedOp, FusedVector, Load,
                       MatMul, Program, Store)
from .dmme.engine import EngineGeometry, Mode, matmul_cycles, run_dense_batch, run_matmul
from .errors import DimMismatch
from .nmformat import CompressedMatrix, NmConfig, compress
from .pruner import group_topn_mask, quantize
from .softmax import SoftmaxConfig, softmax_rows, to_fixed

log = logging.getLogger(__name__)

ACT_FRAC = 10
WEIGHT_FRAC = 12
ACT_LIMIT = (1 << 15) - 1
LN_EPS = 1e-5


def requantize(x, shift: int) -> np.ndarray:
    """Round-half-up arithmetic shift right, saturated to int16."""
    x = np.asarray(x, dtype=np.int64)
    if shift > 0:
        x = (x + (1 << (shift - 1))) >> shift
    elif shift < 0:
        x = x << -shift
    return np.clip(x, -ACT_LIMIT - 1, ACT_LIMIT)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _activation(x, code: int):
    return gelu(x) if code == 0 else np.maximum(x, 0.0)


@dataclass
class ModelWeights:
    """Quantised N:M weights (``K x L``, WEIGHT_FRAC) and biases per weight id."""

    nm: NmConfig
    weights: dict
    biases: dict
    _compressed: dict = field(default_factory=dict, repr=False)

    def compressed(self, wid: str) -> CompressedMatrix:
        if wid not in self._compressed:
            self._compressed[wid] = compress(self.weights[wid], self.nm)
        return self._compressed[wid]

    @classmethod
    def synthetic(cls, program: Program, nm: NmConfig, seed: int = 0) -> "ModelWeights":
        """Gaussian weights scaled by ``1/sqrt(K)``, pruned group-wise to ``nm``, then quantised."""
        rng = np.random.default_rng(seed)
        weights, biases = {}, {}
        for wid in program.weight_ids():
            k, l = program.tensors[wid].shape
            w = rng.normal(0.0, 1.0 / math.sqrt(k), size=(k, l))
            w = w * group_topn_mask(w, nm.n, nm.m).bits
            weights[wid] = quantize(w, WEIGHT_FRAC)
            biases[wid] = quantize(rng.normal(0.0, 0.02, size=l), WEIGHT_FRAC)
        return cls(nm, weights, biases)


def synthetic_inputs(program: Program, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed + 1)
    return {name: to_fixed(rng.normal(0.0, 1.0, size=program.tensors[name].shape), ACT_FRAC)
            for name in program.inputs}


@dataclass
class BlockStats:
    name: str
    kind: str
    matmul_cycles: int = 0
    softmax_cycles: int = 0
    vector_cycles: int = 0
    macs: int = 0

    @property
    def cycles(self) -> int:
        return self.matmul_cycles + self.softmax_cycles + self.vector_cycles

    def as_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "cycles": self.cycles,
                "matmul_cycles": self.matmul_cycles, "softmax_cycles": self.softmax_cycles,
                "vector_cycles": self.vector_cycles, "macs": self.macs}


@dataclass
class ExecResult:
    outputs: dict
    blocks: list
    bytes_moved: dict
    overflow_count: int = 0
    values: dict = field(default_factory=dict, repr=False)

    @property
    def total_cycles(self) -> int:
        return sum(b.cycles for b in self.blocks)

    @property
    def total_macs(self) -> int:
        return sum(b.macs for b in self.blocks)


def _split_heads(x: np.ndarray, heads: int, stacked: bool) -> np.ndarray:
    """``(heads*J, K)`` stacked rows or ``(J, heads*K)`` column blocks -> ``(heads, J, K)``."""
    if stacked:
        return x.reshape(heads, x.shape[0] // heads, x.shape[1])
    return x.reshape(x.shape[0], heads, x.shape[1] // heads).transpose(1, 0, 2)


def _join_heads(x: np.ndarray, stacked: bool) -> np.ndarray:
    heads, j, l = x.shape
    return x.reshape(heads * j, l) if stacked else x.transpose(1, 0, 2).reshape(j, heads * l)


def _head_operands(ins: MatMul, a, b):
    a3 = _split_heads(a, ins.heads, ins.a_stacked)
    if ins.transpose_b:
        b3 = _split_heads(b, ins.heads, False).transpose(0, 2, 1)
    else:
        b3 = _split_heads(b, ins.heads, False)
    return a3, b3


def _causal_lengths(rows: int, length: int) -> np.ndarray:
    return np.arange(rows) % length + 1


@dataclass
class StaSimulator:
    """Runs programs on a fixed engine geometry, softmax unit and vector unit."""

    geometry: EngineGeometry
    softmax: SoftmaxConfig = field(default_factory=lambda: SoftmaxConfig(q_out=15, max_subtract=True))
    vector_lanes: int = 16
    functional: bool = True
    check: bool = False  # compare every engine product against an int64 matmul
    kernel: object = None

    def vector_cycles(self, elements: int) -> int:
        return math.ceil(elements / self.vector_lanes)

    def run(self, program: Program, weights: ModelWeights | None = None, inputs: dict | None = None) -> ExecResult:
        if self.functional and (weights is None or inputs is None):
            raise ValueError("functional runs need weights and inputs")
        env: dict = {}
        frac: dict = {}
        if self.functional:
            for name in program.inputs:
                env[name] = np.asarray(inputs[name], dtype=np.int64)
                frac[name] = ACT_FRAC
        moved = {"weight": 0, "input": sum(np.prod(program.tensors[n].shape) * ACT_BYTES
                                           for n in program.inputs), "intermediate": 0, "offchip": 0}
        moved["input"] = int(moved["input"])
        overflow = 0
        spans = program.blocks or [("program", "", 0, len(program))]
        stats = []
        for name, kind, start, end in spans:
            st = BlockStats(name, kind)
            for ins in program.instructions[start:end]:
                overflow += self._step(ins, program, weights, env, frac, st, moved)
            stats.append(st)
            log.debug("block %s: %d cycles", name, st.cycles)
        outputs = {name: env.get(name) for name in program.outputs}
        return ExecResult(outputs, stats, moved, overflow, env)

    # one instruction -------------------------------------------------------------
    def _step(self, ins, program, weights, env, frac, st: BlockStats, moved) -> int:
        g = self.geometry
        if isinstance(ins, Load):
            moved["weight"] += ins.bytes
            moved["offchip"] += ins.bytes
            return 0
        if isinstance(ins, Store):
            moved["input"] += ins.bytes
            moved["offchip"] += ins.bytes
            return 0
        rows, cols = program.tensors[ins.out].shape
        moved["intermediate"] += rows * cols * ACT_BYTES
        if isinstance(ins, MatMul):
            return self._matmul(ins, program, weights, env, frac, st)
        if ins.op is FusedOp.SOFTMAX:
            lengths = (_causal_lengths(ins.rows, ins.length) if ins.flags & FLAG_CAUSAL
                       else np.full(ins.rows, ins.length))
            st.softmax_cycles += sum(2 * math.ceil(int(n) / self.softmax.p) + self.softmax.q_out
                                     for n in lengths)
            if self.functional:
                src = ins.operands[0]
                scaled = env[src] / (1 << frac[src]) * (ins.param / SCALE_ONE)
                vals, _ = softmax_rows(to_fixed(scaled, self.softmax.frac_bits), self.softmax, lengths)
                env[ins.out], frac[ins.out] = vals, self.softmax.q_out
            return 0
        st.vector_cycles += self.vector_cycles(ins.rows * ins.length)
        if self.functional:
            env[ins.out] = self._vector(ins, weights, env, frac)
            frac[ins.out] = ACT_FRAC
        return 0

    def _matmul(self, ins: MatMul, program, weights, env, frac, st) -> int:
        g = self.geometry
        batch = ins.heads
        cycles = matmul_cycles(ins.mode, ins.j, ins.k, ins.l, g, batch)
        st.matmul_cycles += cycles
        if ins.sparse:
            st.macs += ins.j * ins.l * math.ceil(ins.k / g.nm.m) * g.nm.n
        else:
            st.macs += batch * ins.j * ins.k * ins.l
        if not self.functional:
            return 0
        a = env[ins.a]
        is_weight = program.tensors[ins.b].weight
        if is_weight:
            wq = weights.weights[ins.b]
            if ins.sparse:
                res = run_matmul(Mode.SPARSE_DENSE, a, weights.compressed(ins.b), g, self.kernel, False)
            else:
                res = run_matmul(Mode.DENSE_DENSE, a, wq, g, self.kernel, False)
            out, b_frac = res.result.astype(np.int64), WEIGHT_FRAC
            if self.check:
                _expect(out, a @ wq)
        else:
            a3, b3 = _head_operands(ins, a, env[ins.b])
            res = run_dense_batch(a3, b3, g, self.kernel, False)
            out, b_frac = _join_heads(res.result.astype(np.int64), ins.out_stacked), frac[ins.b]
            if self.check:
                _expect(out, _join_heads(np.matmul(a3, b3), ins.out_stacked))
        if res.trace.total_cycles != cycles:
            raise AssertionError(f"engine ran {res.trace.total_cycles} cycles, model says {cycles}")
        env[ins.out] = requantize(out, frac[ins.a] + b_frac - ACT_FRAC)
        frac[ins.out] = ACT_FRAC
        return res.trace.overflow_count

    def _vector(self, ins: FusedVector, weights, env, frac) -> np.ndarray:
        def real(name):
            return env[name] / (1 << frac[name])

        x = real(ins.operands[0])
        if ins.op is FusedOp.BIAS_ADD:
            y = x + weights.biases[ins.operands[1]] / (1 << WEIGHT_FRAC)
        elif ins.op is FusedOp.ACTIVATION:
            y = _activation(x, ins.param)
        elif ins.op is FusedOp.RESIDUAL_ADD:
            y = x + real(ins.operands[1])
            if ins.flags & FLAG_LAYER_NORM:
                y = layer_norm(y)
        else:
            raise ValueError(f"unexpected vector op {ins.op}")
        return to_fixed(y, ACT_FRAC)


def _expect(got, want):
    wrapped = ((np.asarray(want, dtype=np.int64) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)
    if not np.array_equal(got, wrapped):
        raise AssertionError("engine product differs from the integer reference")


def reference_forward(program: Program, weights: ModelWeights, inputs: dict) -> dict:
    """Float64 replay of ``program`` with the same quantised weights and inputs.

    Products are exact, the softmax is the textbook one and nothing is
    requantised between instructions.
    """
    env = {name: np.asarray(inputs[name]) / (1 << ACT_FRAC) for name in program.inputs}
    for ins in program:
        if isinstance(ins, (Load, Store)):
            continue
        if isinstance(ins, MatMul):
            a = env[ins.a]
            if program.tensors[ins.b].weight:
                env[ins.out] = a @ (weights.weights[ins.b] / (1 << WEIGHT_FRAC))
            else:
                a3, b3 = _head_operands(ins, a, env[ins.b])
                env[ins.out] = _join_heads(np.matmul(a3, b3), ins.out_stacked)
            continue
        x = env[ins.operands[0]]
        if ins.op is FusedOp.SOFTMAX:
            s = x * (ins.param / SCALE_ONE)
            if ins.flags & FLAG_CAUSAL:
                lengths = _causal_lengths(ins.rows, ins.length)
                s = np.where(np.arange(ins.length)[None, :] < lengths[:, None], s, -np.inf)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            env[ins.out] = e / e.sum(axis=1, keepdims=True)
        elif ins.op is FusedOp.BIAS_ADD:
            env[ins.out] = x + weights.biases[ins.operands[1]] / (1 << WEIGHT_FRAC)
        elif ins.op is FusedOp.ACTIVATION:
            env[ins.out] = _activation(x, ins.param)
        else:
            y = x + env[ins.operands[1]]
            env[ins.out] = layer_norm(y) if ins.flags & FLAG_LAYER_NORM else y
    return {name: env[name] for name in program.outputs}


def dequantize(x, frac_bits: int = ACT_FRAC) -> np.ndarray:
    return np.asarray(x) / (1 << frac_bits)


def check_inputs(program: Program, inputs: dict):
    for name in program.inputs:
        want = program.tensors[name].shape
        if name not in inputs or np.shape(inputs[name]) != tuple(want):
            raise DimMismatch(f"input {name} must have shape {want}")
