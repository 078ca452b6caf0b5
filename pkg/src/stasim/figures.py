"""CSV tables behind the compression sweep and the 1:2 dataflow micro-benchmark."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dmme.engine import FIGURE_GEOMETRY, FIGURE_NM, CycleTrace, Mode, run_matmul
from .nmformat import NmConfig, StorageFormat, compress, decompress, random_nm_matrix, storage_cost

SWEEP_Q = (4, 8, 16, 32)
SWEEP_PATTERNS = ("2:4", "4:8", "2:8", "1:8", "2:16")
SWEEP_DIMS = (768, 768)  # one square hidden-size weight


def cr_sweep(dims=SWEEP_DIMS, qs=SWEEP_Q, patterns=SWEEP_PATTERNS) -> list[dict]:
    """Dense bits over stored bits for every (q, pattern, format) with fully populated groups."""
    rows, cols = dims
    out = []
    for q in qs:
        for pat in patterns:
            nm = NmConfig.parse(pat, q)
            nnz = -(-rows // nm.m) * nm.n * cols
            dense = q * rows * cols
            for fmt in StorageFormat:
                bits = storage_cost(fmt, dims, nm, nnz)
                out.append({"q": q, "pattern": pat, "format": fmt.value, "bits": bits,
                            "compression_ratio": round(dense / bits, 6)})
    return out


@dataclass
class MicroCase:
    name: str
    mode: Mode
    trace: CycleTrace
    exact: bool

    def row(self) -> dict:
        t = self.trace
        return {"case": self.name, "mode": self.mode.value, "cycles": t.compute_cycles,
                "drain_cycles": t.drain_cycles, "total_with_drain": t.total_cycles,
                "macs": t.total_macs, "exact": self.exact}


def figure_operands(seed: int = 0):
    """2x4 inputs and 4x2 weights that satisfy 1:2 along the reduction axis."""
    rng = np.random.default_rng(seed)
    a = rng.integers(-8, 9, size=(2, 4))
    w = random_nm_matrix(rng, 4, 2, FIGURE_NM)
    return a, w


def micro_benchmark(seed: int = 0, kernel=None) -> list[MicroCase]:
    """Dense-mode and sparse-mode runs of the 1:2 example plus the forced-dense baseline."""
    a, w = figure_operands(seed)
    comp = compress(w, FIGURE_NM)
    want = a @ w
    jobs = [("dense", Mode.DENSE_DENSE, w), ("sparse", Mode.SPARSE_DENSE, comp),
            ("baseline", Mode.DENSE_DENSE, decompress(comp))]

    def one(job):
        name, mode, b = job
        res = run_matmul(mode, a, b, FIGURE_GEOMETRY, kernel)
        return MicroCase(name, mode, res.trace, bool(np.array_equal(res.result, want)))

    with ThreadPoolExecutor() as pool:
        return list(pool.map(one, jobs))


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(rows[0]))
        out.writeheader()
        out.writerows(rows)


def write_figures(out_dir, seed: int = 0) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    with ThreadPoolExecutor() as pool:
        sweep = pool.submit(cr_sweep)
        micro = pool.submit(micro_benchmark, seed)
        sweep, micro = sweep.result(), micro.result()
    paths = [os.path.join(out_dir, "cr_sweep.csv"), os.path.join(out_dir, "dataflow_cycles.csv")]
    _write_rows(paths[0], sweep)
    _write_rows(paths[1], [c.row() for c in micro])
    for case in micro:
        path = os.path.join(out_dir, f"dataflow_trace_{case.name}.csv")
        case.trace.write_csv(path)
        paths.append(path)
    return paths
