"""Cycle-accurate model of the diverse MatMul engine (DMME)."""

from .backend import BACKEND
from .engine import (
    FIGURE_GEOMETRY,
    FIGURE_NM,
    BankAccess,
    CycleTrace,
    EngineGeometry,
    MatmulResult,
    Mode,
    Routing,
    bank_address,
    drain_cycles,
    drain_results,
    fill_skew,
    matmul_cycles,
    pass_count,
    pass_cycles,
    run_dense_batch,
    run_matmul,
    stack_bank_words,
    stream_steps,
)
from .pe import PeMode, PeState, ReferenceEngine, UnifiedPE, n_parallel_mac, selector_decode, wrap32

__all__ = [
    "BACKEND", "FIGURE_GEOMETRY", "FIGURE_NM", "BankAccess", "CycleTrace", "EngineGeometry",
    "MatmulResult", "Mode", "Routing", "bank_address", "drain_cycles", "drain_results", "fill_skew",
    "matmul_cycles", "pass_count", "pass_cycles", "run_dense_batch", "run_matmul",
    "stack_bank_words", "stream_steps", "PeMode", "PeState", "ReferenceEngine", "UnifiedPE",
    "n_parallel_mac", "selector_decode", "wrap32",
]
