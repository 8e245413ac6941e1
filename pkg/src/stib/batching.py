"""Per-epoch batch streams over window ordinals.

Shuffling permutes window ordinals, never raw time steps. Permutations come
from a counter-based generator (Philox) keyed on (seed, epoch, split) so any
number of workers derive the same order without talking to each other.
"""

from dataclasses import dataclass

import numpy as np

from .preprocess import (
    MaterializedDataset,
    build_materialized,
    compute_stats,
    snapshot,
    standardize_in_place,
    window_views,
)

SHUFFLE_MODES = ("none", "global", "local_batch")
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class ShuffleSpec:
    mode: str = "global"
    base_seed: int = 0

    def __post_init__(self):
        if self.mode not in SHUFFLE_MODES:
            raise ValueError(f"unknown shuffle mode {self.mode!r}; expected one of {SHUFFLE_MODES}")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError("base_seed must fit in 64 unsigned bits")


def _generator(base_seed, epoch, split, stream):
    seq = np.random.SeedSequence([base_seed, epoch, _SPLIT_CODES[split], stream])
    return np.random.Generator(np.random.Philox(seq))


def epoch_permutation(spec, epoch, count, split="train"):
    """Order of ``count`` items for ``epoch``; identity unless ``spec.mode == 'global'``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if spec.mode != "global":
        return np.arange(count, dtype=np.int64)
    # Generator.permutation is a Fisher-Yates shuffle
    return _generator(spec.base_seed, epoch, split, 0).permutation(count).astype(np.int64)


def local_batch_permutation(spec, epoch, n_batches, split="train"):
    """Order of frozen batches for ``epoch`` under batch-level shuffling."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if spec.mode == "global":
        raise ValueError("local batch shuffling and global shuffling are mutually exclusive")
    if spec.mode == "none":
        return np.arange(n_batches, dtype=np.int64)
    return _generator(spec.base_seed, epoch, split, 1).permutation(n_batches).astype(np.int64)


def batch_ordinals(plan, split, spec, epoch, batch_size, drop_last=False):
    """Window ordinals of each batch of one epoch, in emission order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    lo, hi = plan.split_range(split)
    n = hi - lo
    if n < 1:
        raise ValueError(f"split {split!r} is empty")
    if spec.mode == "local_batch":
        chunks = _chunk(np.arange(lo, hi, dtype=np.int64), batch_size, drop_last)
        if not chunks:
            return []
        order = local_batch_permutation(spec, epoch, len(chunks), split)
        return [chunks[k] for k in order]
    ordinals = lo + epoch_permutation(spec, epoch, n, split)
    return _chunk(ordinals, batch_size, drop_last)


def _chunk(ordinals, batch_size, drop_last):
    n = len(ordinals)
    stop = n - n % batch_size if drop_last else n
    return [ordinals[i:i + batch_size] for i in range(0, stop, batch_size)]


@dataclass(frozen=True, eq=False)
class Batch:
    window_ordinals: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.window_ordinals)


class IndexSource:
    """Windows served from one standardized signal plus start indices.

    Gathering a batch copies each selected window once into a contiguous
    block; that is the only element copy of the index pipeline.
    """

    kind = "index"

    def __init__(self, signal, plan, stats, ledger=None):
        if plan.entries > signal.entries:
            raise ValueError(f"plan needs {plan.entries} entries, signal has {signal.entries}")
        self.signal = signal
        self.plan = plan
        self.stats = stats
        self.ledger = ledger
        self._xv, self._yv = window_views(signal.values, plan)
        if ledger is not None:
            ledger.add("data", signal.nbytes, 0)
            ledger.add("index", plan.starts.nbytes, 0)

    @property
    def nodes(self):
        return self.signal.nodes

    @property
    def features(self):
        return self.signal.features

    @property
    def element_width(self):
        return self.signal.element_width

    def snapshot(self, i):
        return snapshot(self.signal, self.plan, i, self.ledger)

    def gather(self, ordinals):
        x = self._xv[ordinals]
        y = self._yv[ordinals]
        if self.ledger is not None:
            self.ledger.add("batch", x.nbytes + y.nbytes, x.size + y.size)
        return x, y


class MaterializedSource:
    """Windows served from pre-stacked copies."""

    kind = "materialized"

    def __init__(self, dataset: MaterializedDataset, ledger=None):
        self.dataset = dataset
        self.plan = dataset.plan
        self.stats = dataset.stats
        self.ledger = ledger

    @property
    def nodes(self):
        return self.dataset.x_stack.shape[2]

    @property
    def features(self):
        return self.dataset.x_stack.shape[3]

    @property
    def element_width(self):
        return self.dataset.x_stack.itemsize

    def gather(self, ordinals):
        x = self.dataset.x_stack[ordinals]
        y = self.dataset.y_stack[ordinals]
        if self.ledger is not None:
            self.ledger.add("batch", x.nbytes + y.nbytes, x.size + y.size)
        return x, y


def batches(source, split, spec, epoch, batch_size, drop_last=False):
    """Yield the :class:`Batch` stream of one epoch for ``split``."""
    for ords in batch_ordinals(source.plan, split, spec, epoch, batch_size, drop_last):
        x, y = source.gather(ords)
        yield Batch(ords, x, y)


def prepare_source(signal, plan, mode="index", stats_mode="window_weighted",
                   per_feature=False, ledger=None, memory_limit=None):
    """Standardize ``signal`` under ``plan`` and wrap it as a window source.

    Index mode standardizes ``signal`` in place. Materialized mode leaves it
    untouched and stacks standardized copies. Both use the same statistics,
    so they serve bitwise-identical windows.
    """
    stats = compute_stats(signal, plan, stats_mode, per_feature)
    if mode == "index":
        standardize_in_place(signal, stats)
        return IndexSource(signal, plan, stats, ledger)
    if mode == "materialized":
        ds = build_materialized(signal, plan, stats, ledger, memory_limit)
        return MaterializedSource(ds, ledger)
    raise ValueError(f"unknown pipeline mode {mode!r}; expected 'index' or 'materialized'")
