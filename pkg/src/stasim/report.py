"""End-to-end simulation driver and its report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .compiler import MemoryConfig, ModelConfig, build_ir, lower, mac_count, validate_program
from .dmme.engine import EngineGeometry
from .errors import StaError
from .executor import ModelWeights, StaSimulator, dequantize, reference_forward, synthetic_inputs
from .nmformat import NmConfig, compression_ratio
from .softmax import SoftmaxConfig


class ProgramInvalid(StaError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"{len(diagnostics)} diagnostics, first: {diagnostics[0]}")


@dataclass
class SimReport:
    model: str
    nm: str
    geometry: str
    mode: str
    total_cycles: int
    baseline_cycles: int
    dense_macs: int
    sparse_macs: int
    blocks: list
    bytes_moved: dict
    compression_ratio: float
    overflow_count: int = 0
    reference_max_abs_error: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.baseline_cycles / self.total_cycles

    def as_dict(self) -> dict:
        out = asdict(self)
        out["speedup"] = self.speedup
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def write_csv(self, path):
        """Per-ResBlock cycle breakdown."""
        keys = ["name", "kind", "cycles", "matmul_cycles", "softmax_cycles", "vector_cycles", "macs"]
        with open(path, "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=keys)
            out.writeheader()
            out.writerows(self.blocks)


def _weight_cr(program, nm: NmConfig) -> float:
    dense = comp = 0
    for wid in program.weight_ids():
        k, l = program.tensors[wid].shape
        dense += nm.q * k * l
        comp += nm.q * k * l / float(compression_ratio(nm, k))
    return dense / comp if comp else 1.0


def simulate(config: ModelConfig, nm: NmConfig, geometry: EngineGeometry | None = None, mode: str = "auto",
             seed: int = 0, functional: bool = True, reference: bool = True,
             softmax: SoftmaxConfig | None = None, memory: MemoryConfig = MemoryConfig(),
             kernel=None) -> SimReport:
    """Compile ``config``, run it single-batch and compare with the forced-dense run on the same geometry."""
    geometry = geometry or EngineGeometry.default(nm)
    ir = build_ir(config)
    program = lower(ir, nm, mode)
    baseline_prog = program if mode == "dense" else lower(ir, nm, "dense")
    diags = validate_program(program, memory)
    if diags:
        raise ProgramInvalid(diags)
    sim = StaSimulator(geometry, functional=functional, kernel=kernel)
    if softmax is not None:
        sim.softmax = softmax
    weights = inputs = None
    if functional:
        weights = ModelWeights.synthetic(program, nm, seed)
        inputs = synthetic_inputs(program, seed)
    run = sim.run(program, weights, inputs)
    if baseline_prog is program:
        baseline = run.total_cycles
    else:
        baseline = StaSimulator(geometry, sim.softmax, sim.vector_lanes, functional=False).run(
            baseline_prog).total_cycles
    err = None
    if functional and reference:
        ref = reference_forward(program, weights, inputs)
        err = max(float(np.abs(dequantize(run.outputs[k]) - ref[k]).max()) for k in program.outputs)
    macs = mac_count(ir, nm)
    dense_mode = mode == "dense"
    return SimReport(
        model=config.name, nm=str(nm), geometry=str(geometry), mode=mode,
        total_cycles=run.total_cycles, baseline_cycles=baseline,
        dense_macs=macs.dense_macs + (macs.weight_dense_macs if dense_mode else 0),
        sparse_macs=0 if dense_mode else macs.sparse_macs,
        blocks=[b.as_dict() for b in run.blocks], bytes_moved=run.bytes_moved,
        compression_ratio=1.0 if dense_mode else _weight_cr(program, nm),
        overflow_count=run.overflow_count, reference_max_abs_error=err,
        config={"model": config.to_dict(), "nm": str(nm), "q": nm.q, "geometry": str(geometry),
                "mode": mode, "seed": seed, "softmax": asdict(sim.softmax),
                "vector_lanes": sim.vector_lanes, "memory": asdict(memory)})
