"""Group-wise magnitude masking and inherited dynamic pruning (IDP).

Weights are float ``K x L`` matrices grouped along axis 0.  Gradients come
from a caller-supplied callback, so everything here is plain array algebra.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimMismatch, InvalidConfig, PatternViolation
from .nmformat import NmConfig, compress, pack_mask_bits, write_nmsp

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MaskTensor:
    """Boolean keep-mask with the weight's shape plus its N:M bookkeeping."""

    bits: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))
        if self.bits.ndim != 2:
            raise DimMismatch("mask must be 2-D")

    @property
    def shape(self):
        return self.bits.shape

    def group_counts(self) -> np.ndarray:
        k, j = self.bits.shape
        g = -(-k // self.m)
        padded = np.zeros((g * self.m, j), dtype=bool)
        padded[:k] = self.bits
        return padded.reshape(g, self.m, j).sum(axis=1)

    def group_words(self) -> np.ndarray:
        """One m-bit word per group, shape ``(G, J)``, LSB = first row of the group."""
        k, j = self.bits.shape
        g = -(-k // self.m)
        padded = np.zeros((g * self.m, j), dtype=bool)
        padded[:k] = self.bits
        return pack_mask_bits(padded.reshape(g, self.m, j).transpose(0, 2, 1))

    def validate(self) -> "MaskTensor":
        counts = self.group_counts().ravel()
        bad = np.flatnonzero(counts > self.n)
        if bad.size:
            raise PatternViolation(int(bad[0]), int(counts[bad[0]]), self.n)
        return self

    def __eq__(self, other):
        if not isinstance(other, MaskTensor):
            return NotImplemented
        return self.n == other.n and self.m == other.m and np.array_equal(self.bits, other.bits)


def group_topn_mask(weights, n: int, m: int) -> MaskTensor:
    """Keep the ``n`` largest magnitudes of every group of ``m`` rows.

    Ties keep the lowest index, which also decides which zeros are kept when a
    group has fewer than ``n`` nonzeros.
    """
    w = np.asarray(weights)
    if w.ndim != 2:
        raise DimMismatch("weights must be 2-D")
    if not 1 <= n <= m:
        raise InvalidConfig(f"need 1 <= n <= m, got {n}:{m}")
    k, j = w.shape
    g = -(-k // m)
    mag = np.full((g * m, j), -1.0)  # padding rows never win
    mag[:k] = np.abs(w)
    mag = mag.reshape(g, m, j)
    order = np.argsort(-mag, axis=1, kind="stable")[:, :n, :]
    keep = np.zeros((g, m, j), dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return MaskTensor(keep.reshape(g * m, j)[:k], n, m).validate()


def apply_mask(weights, mask: MaskTensor) -> np.ndarray:
    w = np.asarray(weights)
    if w.shape != mask.shape:
        raise DimMismatch(f"weights {w.shape} vs mask {mask.shape}")
    return w * mask.bits


def dynamic_update_step(weights, mask: MaskTensor, gradient, lr: float, reg: float,
                        reg_sign: float = 1.0) -> np.ndarray:
    """``W - lr * gradient + reg_sign * reg * ((1 - B) * W)``.

    ``reg_sign=+1`` is the update exactly as the algorithm prints it; ``-1``
    decays the pruned weights instead.
    """
    w = np.asarray(weights, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if w.shape != mask.shape or g.shape != w.shape:
        raise DimMismatch(f"weights {w.shape}, mask {mask.shape}, gradient {g.shape}")
    return w - lr * g + reg_sign * reg * (~mask.bits * w)


def sparsity_of(mask: MaskTensor) -> float:
    total = mask.bits.size
    if total == 0:
        return 1.0
    return 1.0 - np.count_nonzero(mask.bits) / total


@dataclass(frozen=True)
class IdpSchedule:
    m: int
    n_end: int
    epochs_per_step: int
    learning_rate: float
    regularizer: float = 0.0
    n_start: int | None = None
    reg_sign: float = 1.0

    def __post_init__(self):
        if self.n_start is None:
            object.__setattr__(self, "n_start", self.m - 1)
        if not (1 <= self.n_end <= self.n_start < self.m):
            raise InvalidConfig(f"need 1 <= n_end <= n_start < m, got {self.n_end}, {self.n_start}, {self.m}")
        if self.epochs_per_step < 1:
            raise InvalidConfig("epochs_per_step must be at least 1")

    def steps(self):
        return range(self.n_start, self.n_end - 1, -1)


@dataclass(eq=False)
class Winner:
    n: int
    weights: np.ndarray   # W_T masked by the final mask
    mask: MaskTensor
    inherited: np.ndarray  # weights the step started from
    boundary_mask: MaskTensor  # first mask generated at this N


@dataclass
class WinnerSet:
    m: int
    winners: list = field(default_factory=list)

    def __len__(self):
        return len(self.winners)

    def __iter__(self):
        return iter(self.winners)

    def __getitem__(self, i):
        return self.winners[i]

    def save(self, out_dir, frac_bits: int = 12, q: int = 16) -> str:
        """Write one NMSP file per winner plus ``manifest.jsonl``; returns the manifest path."""
        os.makedirs(out_dir, exist_ok=True)
        manifest = os.path.join(out_dir, "manifest.jsonl")
        with open(manifest, "w") as fh:
            for w in self.winners:
                cfg = NmConfig(w.n, self.m, q)
                ints = quantize(w.weights, frac_bits, q)
                path = os.path.join(out_dir, f"winner_{w.n}of{self.m}.nmsp")
                write_nmsp(compress(ints, cfg), path)
                fh.write(json.dumps({"n": w.n, "m": self.m, "sparsity": sparsity_of(w.mask),
                                     "path": os.path.basename(path), "frac_bits": frac_bits}) + "\n")
        return manifest


def quantize(values, frac_bits: int, q: int = 16) -> np.ndarray:
    lo, hi = -(1 << (q - 1)), (1 << (q - 1)) - 1
    return np.clip(np.rint(np.asarray(values) * (1 << frac_bits)), lo, hi).astype(np.int64)


TrainStep = Callable[[np.ndarray, MaskTensor], np.ndarray]


def run_idp(initial_weights, schedule: IdpSchedule, train_step: TrainStep) -> WinnerSet:
    """Produce one winner per N from ``n_start`` down to ``n_end``.

    Each step starts from the previous winner's kept weights (the dense input
    counts as the first winner), regenerates the mask every iteration and keeps
    the last-iteration model.
    """
    w_prev = np.array(initial_weights, dtype=float)
    if w_prev.ndim != 2:
        raise DimMismatch("weights must be 2-D")
    out = WinnerSet(schedule.m)
    for n in schedule.steps():
        w = w_prev.copy()
        boundary = None
        for _ in range(schedule.epochs_per_step):
            mask = group_topn_mask(w, n, schedule.m)
            if boundary is None:
                boundary = mask
            grad = train_step(apply_mask(w, mask), mask)
            w = dynamic_update_step(w, mask, grad, schedule.learning_rate,
                                    schedule.regularizer, schedule.reg_sign)
        final = group_topn_mask(w, n, schedule.m)
        kept = apply_mask(w, final)
        log.debug("idp winner n=%d sparsity=%.4f", n, sparsity_of(final))
        out.winners.append(Winner(n, kept, final, w_prev, boundary))
        w_prev = kept
    return out


def masked_quadratic(target) -> TrainStep:
    """Gradient callback for ``0.5 * ||W*B - T||^2`` with respect to ``W``."""
    t = np.asarray(target, dtype=float)

    def grad(masked_weights, mask):
        return (masked_weights - t) * mask.bits

    return grad
