import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from stib.batching import (
    IndexSource,
    ShuffleSpec,
    batch_ordinals,
    batches,
    epoch_permutation,
    local_batch_permutation,
    prepare_source,
)
from stib.dataset import gen_synthetic
from stib.memory import AllocLedger
from stib.preprocess import plan_windows, snapshot


def test_identity_without_shuffle():
    assert epoch_permutation(ShuffleSpec("none"), 0, 4).tolist() == [0, 1, 2, 3]


def test_workers_derive_same_permutation():
    a = epoch_permutation(ShuffleSpec("global", 17), 3, 50)
    b = epoch_permutation(ShuffleSpec("global", 17), 3, 50)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, epoch_permutation(ShuffleSpec("global", 17), 4, 50))


def test_permutation_distribution():
    spec = ShuffleSpec("global", 0)
    n = 10_000
    counts = Counter(tuple(epoch_permutation(spec, e, 4).tolist()) for e in range(n))
    assert set(counts) == set(itertools.permutations(range(4)))
    p = 1 / 24
    sd = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sd for c in counts.values())
    stat = sum((c - n * p) ** 2 / (n * p) for c in counts.values())
    assert chi2.sf(stat, df=23) > 1e-3


def test_batches_keep_last():
    plan = plan_windows(8, 1, split=(0.75, 0.1))
    spec = ShuffleSpec("none")
    assert plan.train_end == 5
    got = [b.tolist() for b in batch_ordinals(plan, "train", spec, 0, 2)]
    assert got == [[0, 1], [2, 3], [4]]
    got = [b.tolist() for b in batch_ordinals(plan, "train", spec, 0, 2, drop_last=True)]
    assert got == [[0, 1], [2, 3]]


def test_single_batch_permutation():
    assert local_batch_permutation(ShuffleSpec("local_batch"), 5, 1).tolist() == [0]


def test_local_batch_rejects_global_mode():
    with pytest.raises(ValueError):
        local_batch_permutation(ShuffleSpec("global"), 0, 3)


def test_unknown_mode():
    with pytest.raises(ValueError):
        ShuffleSpec("sometimes")


@given(st.integers(5, 200), st.integers(1, 16), st.integers(0, 2**32), st.integers(0, 50),
       st.integers(0, 50))
def test_local_batch_membership_invariant(entries, b, seed, e1, e2):
    plan = plan_windows(entries, 1)
    spec = ShuffleSpec("local_batch", seed)
    a = batch_ordinals(plan, "train", spec, e1, b)
    c = batch_ordinals(plan, "train", spec, e2, b)
    assert Counter(tuple(x.tolist()) for x in a) == Counter(tuple(x.tolist()) for x in c)


@given(st.integers(2, 300), st.integers(1, 64), st.integers(0, 2**32), st.integers(0, 100),
       st.sampled_from(["train", "val", "test"]))
def test_global_epoch_coverage(entries, b, seed, epoch, split):
    plan = plan_windows(entries, 1)
    if plan.split_size(split) == 0:
        return
    got = np.concatenate(batch_ordinals(plan, split, ShuffleSpec("global", seed), epoch, b))
    lo, hi = plan.split_range(split)
    assert sorted(got.tolist()) == list(range(lo, hi))


def _source(mode, entries=80, nodes=3, features=2, h=4, seed=0, ledger=None):
    sig, _ = gen_synthetic(entries, nodes, features, seed=seed)
    plan = plan_windows(sig, h)
    return prepare_source(sig, plan, mode, ledger=ledger)


@pytest.mark.parametrize("mode", ["none", "global", "local_batch"])
def test_index_and_materialized_streams_bitwise(mode):
    idx = _source("index")
    mat = _source("materialized")
    for split in ("train", "val", "test"):
        for epoch in range(3):
            spec = ShuffleSpec(mode, 7)
            for a, c in zip(batches(idx, split, spec, epoch, 5),
                            batches(mat, split, spec, epoch, 5), strict=True):
                assert np.array_equal(a.window_ordinals, c.window_ordinals)
                assert a.x.tobytes() == c.x.tobytes()
                assert a.y.tobytes() == c.y.tobytes()


def test_batch_rows_are_snapshots():
    src = _source("index")
    lo, hi = src.plan.split_range("val")
    for batch in batches(src, "val", ShuffleSpec("global", 1), 2, 3):
        assert all(lo <= o < hi for o in batch.window_ordinals)
        for row, o in enumerate(batch.window_ordinals):
            s = snapshot(src.signal, src.plan, int(o))
            assert np.array_equal(batch.x[row], s.x)
            assert np.array_equal(batch.y[row], s.y)


def test_gather_is_recorded_as_batch_copy():
    ledger = AllocLedger()
    src = _source("index", ledger=ledger)
    assert isinstance(src, IndexSource)
    batch = next(batches(src, "train", ShuffleSpec("none"), 0, 4))
    assert ledger.copies("batch") == batch.x.size + batch.y.size
    assert ledger.copies("data") == ledger.copies("index") == 0
