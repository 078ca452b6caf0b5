import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stasim.errors import DimMismatch, InvalidConfig, PatternViolation
from stasim.nmformat import decompress, read_nmsp
from stasim.pruner import (
    IdpSchedule,
    MaskTensor,
    apply_mask,
    dynamic_update_step,
    group_topn_mask,
    masked_quadratic,
    run_idp,
    sparsity_of,
)


def brute_topn(group, n):
    """Subset of size n maximising the kept |w| sum; among ties the lexicographically lowest indices."""
    best, best_sum = None, -1.0
    for combo in itertools.combinations(range(len(group)), n):
        s = sum(abs(group[i]) for i in combo)
        if s > best_sum + 1e-12:
            best, best_sum = combo, s
    return best


def test_top2_example():
    m = group_topn_mask(np.array([[0.5], [-0.9], [0.1], [0.7]]), 2, 4)
    assert m.group_words().tolist() == [[0b1010]]


def test_all_zero_group_keeps_lowest():
    m = group_topn_mask(np.zeros((4, 1)), 2, 4)
    assert m.group_words().tolist() == [[0b0011]]


def test_topn_vs_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(500):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(1, m))
        # small integer magnitudes produce plenty of ties
        g = rng.integers(-3, 4, size=m).astype(float)
        mask = group_topn_mask(g[:, None], n, m)
        kept = tuple(np.flatnonzero(mask.bits[:, 0]))
        assert kept == brute_topn(g, n)


def test_padding_rows_never_win():
    w = np.array([[0.0], [0.0], [0.0]])
    mask = group_topn_mask(w, 2, 4)
    assert mask.shape == (3, 1)
    assert mask.bits[:, 0].tolist() == [True, True, False]


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        g = rng.permutation(8) + 1.0
        perm = rng.permutation(8)
        a = group_topn_mask(g[:, None], 3, 8).bits[:, 0]
        b = group_topn_mask(g[perm][:, None], 3, 8).bits[:, 0]
        assert np.array_equal(a[perm], b)


@given(st.integers(1, 40), st.integers(1, 5), st.sampled_from([(1, 4), (2, 4), (2, 8), (3, 8), (2, 16)]),
       st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_masks_satisfy_pattern(k, j, nm, seed):
    n, m = nm
    w = np.random.default_rng(seed).normal(size=(k, j))
    mask = group_topn_mask(w, n, m)
    assert (mask.group_counts() <= n).all()
    mask.validate()


def test_validator_rejects():
    bits = np.ones((4, 1), dtype=bool)
    with pytest.raises(PatternViolation):
        MaskTensor(bits, 2, 4).validate()


def test_topn_arg_checks():
    with pytest.raises(InvalidConfig):
        group_topn_mask(np.ones((4, 1)), 5, 4)
    with pytest.raises(DimMismatch):
        group_topn_mask(np.ones(4), 1, 4)


def test_apply_mask():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(8, 3))
    assert np.array_equal(apply_mask(w, MaskTensor(np.ones_like(w, dtype=bool), 8, 8)), w)
    assert not apply_mask(w, MaskTensor(np.zeros_like(w, dtype=bool), 1, 8)).any()
    mask = group_topn_mask(rng.normal(size=(8, 3)), 2, 4)
    out = apply_mask(w, mask)
    assert np.array_equal(out != 0, mask.bits)
    with pytest.raises(DimMismatch):
        apply_mask(w[:4], mask)


def test_update_step_examples():
    mask = MaskTensor(np.array([[True], [False]]), 1, 2)
    w = np.array([[1.0], [2.0]])
    out = dynamic_update_step(w, mask, np.zeros_like(w), 0.0, 0.1)
    assert np.allclose(out.ravel(), [1.0, 2.2])
    out = dynamic_update_step(w, mask, np.zeros_like(w), 0.0, 0.1, reg_sign=-1.0)
    assert np.allclose(out.ravel(), [1.0, 1.8])
    full = MaskTensor(np.ones((2, 1), dtype=bool), 2, 2)
    g = np.array([[0.5], [-1.0]])
    assert np.allclose(dynamic_update_step(w, full, g, 0.1, 0.0), w - 0.1 * g)
    with pytest.raises(DimMismatch):
        dynamic_update_step(w, full, g[:1], 0.1, 0.0)


def test_masked_quadratic_converges():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(16, 4))
    w = rng.normal(size=(16, 4))
    mask = group_topn_mask(w, 2, 4)
    grad = masked_quadratic(t)
    for _ in range(200):
        w = dynamic_update_step(w, mask, grad(apply_mask(w, mask), mask), 0.1, 0.0)
    assert np.abs((w - t)[mask.bits]).max() < 1e-6


def test_sparsity_of():
    assert sparsity_of(group_topn_mask(np.ones((8, 4)), 2, 4)) == 0.5
    assert sparsity_of(group_topn_mask(np.ones((32, 4)), 2, 16)) == 0.875
    assert sparsity_of(MaskTensor(np.zeros((4, 4), dtype=bool), 1, 4)) == 1.0


def test_schedule_validation():
    assert IdpSchedule(8, 2, 3, 0.1).n_start == 7
    assert list(IdpSchedule(4, 1, 1, 0.1).steps()) == [3, 2, 1]
    for kw in (dict(m=4, n_end=0), dict(m=4, n_end=4), dict(m=4, n_end=2, n_start=1)):
        with pytest.raises(InvalidConfig):
            IdpSchedule(epochs_per_step=1, learning_rate=0.1, **kw)
    with pytest.raises(InvalidConfig):
        IdpSchedule(4, 1, 0, 0.1)


def _quadratic_problem(seed, k=32, j=8):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(k, j))
    return t + rng.normal(scale=0.1, size=t.shape), t


def test_run_idp_lengths_and_subset():
    w0, t = _quadratic_problem(0)
    ws = run_idp(w0, IdpSchedule(4, 1, 20, 0.2), masked_quadratic(t))
    assert [w.n for w in ws] == [3, 2, 1]
    prev_support = np.ones_like(w0, dtype=bool)
    for w in ws:
        # the first mask at this N was drawn from weights supported on the previous winner
        assert np.array_equal(w.inherited != 0, prev_support)
        assert not (w.boundary_mask.bits & ~prev_support).any()
        assert (w.mask.group_counts() <= w.n).all()
        prev_support = w.weights != 0
    assert len(run_idp(w0, IdpSchedule(8, 1, 2, 0.2), masked_quadratic(t))) == 7


def test_run_idp_single_step_equals_direct_pruning():
    w0, t = _quadratic_problem(1)
    sched = IdpSchedule(4, 2, 30, 0.2, n_start=2)
    (winner,) = run_idp(w0, sched, masked_quadratic(t))
    w = w0.copy()
    for _ in range(30):
        mask = group_topn_mask(w, 2, 4)
        w = dynamic_update_step(w, mask, masked_quadratic(t)(apply_mask(w, mask), mask), 0.2, 0.0)
    assert np.array_equal(winner.weights, apply_mask(w, group_topn_mask(w, 2, 4)))


def test_run_idp_converges_without_regularizer():
    w0, t = _quadratic_problem(2)
    ws = run_idp(w0, IdpSchedule(8, 2, 200, 0.1), masked_quadratic(t))
    for w in ws:
        kept = w.mask.bits
        assert np.abs((w.weights - t)[kept]).max() < 1e-6


def test_winner_set_save(tmp_path):
    w0, t = _quadratic_problem(3)
    ws = run_idp(w0, IdpSchedule(4, 1, 10, 0.2), masked_quadratic(t))
    manifest = ws.save(tmp_path)
    entries = [json.loads(line) for line in open(manifest)]
    assert [e["n"] for e in entries] == [3, 2, 1]
    prev = None
    for e in entries:
        dense = decompress(read_nmsp(tmp_path / e["path"]))
        assert dense.shape == w0.shape
        mask = group_topn_mask(dense, e["n"], e["m"])
        assert (mask.group_counts() <= e["n"]).all()
        if prev is not None:
            assert not (mask.bits & (prev == 0)).any()
        prev = dense
