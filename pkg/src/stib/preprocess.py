"""Window planning, standardization and the two data layouts.

The materialized path stacks a copy of every (x, y) window, then standardizes
the stacks with statistics of the training x-stack. The index path keeps one
copy of the signal, standardizes it in place, and serves each window as a
pair of views addressed by its start index.
"""

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from ._kv import read_kv, write_kv
from .dataset import load_signal, save_signal
from .errors import AllocationError, ShapeError, TooFewEntriesError, ZeroVarianceError

SPLITS = ("train", "val", "test")
STAT_MODES = ("window_weighted", "raw_region")


@dataclass(frozen=True, eq=False)
class WindowPlan:
    input_len: int
    output_len: int
    starts: np.ndarray
    train_end: int
    val_end: int

    def __post_init__(self):
        if not 0 <= self.train_end <= self.val_end <= self.count:
            raise ValueError(f"bad split boundaries {self.train_end}, {self.val_end} "
                             f"for {self.count} windows")
        self.starts.flags.writeable = False

    @property
    def count(self):
        return len(self.starts)

    @property
    def window_len(self):
        return self.input_len + self.output_len

    @property
    def entries(self):
        return int(self.starts[-1]) + self.window_len

    def split_range(self, split):
        if split == "train":
            return 0, self.train_end
        if split == "val":
            return self.train_end, self.val_end
        if split == "test":
            return self.val_end, self.count
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")

    def split_size(self, split):
        lo, hi = self.split_range(split)
        return hi - lo

    def split_ordinals(self, split):
        return np.arange(*self.split_range(split), dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, WindowPlan):
            return NotImplemented
        return (self.input_len, self.output_len, self.train_end, self.val_end) == (
            other.input_len, other.output_len, other.train_end, other.val_end
        ) and np.array_equal(self.starts, other.starts)

    __hash__ = None


def _split_count(count, frac):
    # multiply in decimal so 5 * 0.7 rounds as 3.5 -> 4
    return int((Decimal(count) * Decimal(str(frac))).to_integral_value(rounding=ROUND_HALF_UP))


def plan_windows(signal, input_len, output_len=None, split=(0.7, 0.1)):
    """Every valid window start, plus train/val/test boundaries over window ordinals.

    ``signal`` may be a :class:`TemporalSignal` or an entry count.
    """
    entries = signal if isinstance(signal, (int, np.integer)) else signal.entries
    if output_len is None:
        output_len = input_len
    if input_len < 1 or output_len < 1:
        raise ValueError("window lengths must be >= 1")
    train_frac, val_frac = split
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ValueError(f"split fractions must lie in (0, 1) and sum below 1, got {split}")
    minimum = input_len + output_len
    if entries < minimum:
        raise TooFewEntriesError(int(entries), minimum)
    count = int(entries) - minimum + 1
    train_end = _split_count(count, train_frac)
    val_end = train_end + _split_count(count, val_frac)
    val_end = min(val_end, count)
    return WindowPlan(input_len, output_len, np.arange(count, dtype=np.int64), train_end, val_end)


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Mean and standard deviation; scalars, or length-F arrays per feature."""

    mu: object
    sigma: object
    mode: str = "window_weighted"

    def __post_init__(self):
        sig = np.asarray(self.sigma)
        if not (np.isfinite(sig).all() and (sig > 0).all()):
            raise ZeroVarianceError(f"standard deviation must be positive, got {self.sigma}")

    @property
    def per_feature(self):
        return np.ndim(self.sigma) > 0

    def destandardize(self, arr):
        return arr * self.sigma + self.mu


def _training_coverage(plan):
    """How many training x-slices cover each raw time step."""
    diff = np.zeros(plan.entries + 1, dtype=np.int64)
    starts = plan.starts[:plan.train_end]
    np.add.at(diff, starts, 1)
    np.add.at(diff, starts + plan.input_len, -1)
    return np.cumsum(diff[:-1])


def _reject_constant(region, per_feature):
    if per_feature:
        flat = region.reshape(-1, region.shape[-1])
        const = flat.max(axis=0) == flat.min(axis=0)
        if const.any():
            raise ZeroVarianceError(f"training region is constant for features "
                                    f"{np.flatnonzero(const).tolist()}")
    elif region.max() == region.min():
        raise ZeroVarianceError("training region is constant")


def compute_stats(signal, plan, mode="window_weighted", per_feature=False):
    """Training-set mean and population standard deviation without materializing.

    ``window_weighted`` weights every raw step by the number of training
    x-windows covering it, which reproduces the statistics of the stacked
    training x-array. ``raw_region`` takes plain statistics over the raw steps
    touched by training x-windows.
    """
    if plan.train_end < 1:
        raise ValueError("plan has no training windows")
    if mode not in STAT_MODES:
        raise ValueError(f"unknown stats mode {mode!r}")
    values = signal.values
    last = int(plan.starts[plan.train_end - 1]) + plan.input_len
    region = values[:last]
    _reject_constant(region, per_feature)
    axes = (1,) if per_feature else (1, 2)

    if mode == "raw_region":
        mu = region.mean(axis=(0, 1) if per_feature else None, dtype=np.float64)
        sigma = region.std(axis=(0, 1) if per_feature else None, dtype=np.float64)
    else:
        w = _training_coverage(plan)[:last].astype(np.float64)
        per_step = values.shape[1] * (1 if per_feature else values.shape[2])
        n = plan.train_end * plan.input_len * per_step
        sums = region.sum(axis=axes, dtype=np.float64)
        mu = _weighted_sum(w, sums) / n
        sq = np.square(region - mu, dtype=np.float64).sum(axis=axes, dtype=np.float64)
        sigma = np.sqrt(_weighted_sum(w, sq) / n)
    if per_feature:
        mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    else:
        mu, sigma = float(mu), float(sigma)
    return StandardizationStats(mu, sigma, mode)


def _weighted_sum(w, sums):
    if sums.ndim == 1:
        return math.fsum((w * sums).tolist())
    return np.array([math.fsum(col) for col in (w[:, None] * sums).T.tolist()])


def _standardize(arr, stats):
    arr -= np.asarray(stats.mu, dtype=arr.dtype) if stats.per_feature else stats.mu
    arr /= np.asarray(stats.sigma, dtype=arr.dtype) if stats.per_feature else stats.sigma


def standardize_in_place(signal, stats):
    """Map every value v to (v - mu) / sigma in the signal's own buffer."""
    values = signal.values
    values.flags.writeable = True
    try:
        _standardize(values, stats)
    finally:
        values.flags.writeable = False
    return signal


@dataclass(frozen=True, eq=False)
class Snapshot:
    x: np.ndarray
    y: np.ndarray


def snapshot(signal, plan, i, ledger=None):
    """Window ``i`` as views into the (standardized) signal."""
    if not 0 <= i < plan.count:
        raise IndexError(f"window ordinal {i} outside [0, {plan.count})")
    s = int(plan.starts[i])
    mid = s + plan.input_len
    values = signal.values
    x = values[s:mid]
    y = values[mid:mid + plan.output_len]
    if ledger is not None:
        copied = sum(a.size for a in (x, y) if not np.shares_memory(a, values))
        ledger.add("snapshot", 0, copied)
    return Snapshot(x, y)


def window_views(values, plan):
    """(count, T', N, F) and (count, T, N, F) strided views over ``values``."""
    count = plan.count
    xv = np.lib.stride_tricks.sliding_window_view(values, plan.input_len, axis=0)
    yv = np.lib.stride_tricks.sliding_window_view(values, plan.output_len, axis=0)
    xv = np.moveaxis(xv, -1, 1)
    yv = np.moveaxis(yv, -1, 1)
    first = int(plan.starts[0])
    return (xv[first:first + count],
            yv[first + plan.input_len:first + plan.input_len + count])


@dataclass(frozen=True, eq=False)
class MaterializedDataset:
    x_stack: np.ndarray
    y_stack: np.ndarray
    stats: StandardizationStats
    plan: WindowPlan

    @property
    def nbytes(self):
        return self.x_stack.nbytes + self.y_stack.nbytes


def stacked_stats(x_train, per_feature=False):
    """Mean and deviation of a stacked training x-array, as the classic pipeline does."""
    axis = (0, 1, 2) if per_feature else None
    mu = x_train.mean(axis=axis, dtype=np.float64)
    sigma = x_train.std(axis=axis, dtype=np.float64)
    if per_feature:
        return StandardizationStats(np.asarray(mu), np.asarray(sigma), "window_weighted")
    return StandardizationStats(float(mu), float(sigma), "window_weighted")


def build_materialized(signal, plan, stats=None, ledger=None, memory_limit=None,
                       per_feature=False):
    """Stack standardized copies of every window (the classic pipeline).

    With ``stats=None`` the statistics are taken from the stacked training
    x-array itself. The raw signal is left untouched.
    """
    n, f = signal.nodes, signal.features
    if plan.entries > signal.entries:
        raise ShapeError(f"plan needs {plan.entries} entries, signal has {signal.entries}")
    dtype = signal.values.dtype
    x_shape = (plan.count, plan.input_len, n, f)
    y_shape = (plan.count, plan.output_len, n, f)
    requested = (math.prod(x_shape) + math.prod(y_shape)) * dtype.itemsize
    if memory_limit is not None and requested > memory_limit:
        raise AllocationError(requested, f"exceeds memory limit of {memory_limit} bytes")
    try:
        x = np.empty(x_shape, dtype=dtype)
        y = np.empty(y_shape, dtype=dtype)
    except MemoryError:
        raise AllocationError(requested) from None
    xv, yv = window_views(signal.values, plan)
    np.copyto(x, xv)
    np.copyto(y, yv)
    if ledger is not None:
        ledger.add("raw", signal.nbytes, 0)
        ledger.add("preprocess", x.nbytes + y.nbytes, x.size + y.size)
    if stats is None:
        if plan.train_end < 1:
            raise ValueError("plan has no training windows")
        _reject_constant(x[:plan.train_end], per_feature)
        stats = stacked_stats(x[:plan.train_end], per_feature)
    _standardize(x, stats)
    _standardize(y, stats)
    return MaterializedDataset(x, y, stats, plan)


# --- persisted preprocessed signals ------------------------------------------

def save_preprocessed(signal, plan, stats, stem):
    """Write ``<stem>.stb`` and a ``<stem>.meta`` key=value sidecar."""
    if stats.per_feature:
        mu = ",".join(repr(float(v)) for v in stats.mu)
        sigma = ",".join(repr(float(v)) for v in stats.sigma)
    else:
        mu, sigma = repr(stats.mu), repr(stats.sigma)
    save_signal(signal, f"{stem}.stb")
    write_kv(f"{stem}.meta", {
        "format": "stib-preprocessed/1",
        "mu": mu, "sigma": sigma, "stats_mode": stats.mode,
        "per_feature": int(stats.per_feature),
        "input_len": plan.input_len, "output_len": plan.output_len,
        "count": plan.count, "train_end": plan.train_end, "val_end": plan.val_end,
    })


def load_preprocessed(stem):
    meta = read_kv(f"{stem}.meta")
    signal = load_signal(f"{stem}.stb", format="stb")
    if int(meta["per_feature"]):
        mu = np.array([float(v) for v in meta["mu"].split(",")])
        sigma = np.array([float(v) for v in meta["sigma"].split(",")])
    else:
        mu, sigma = float(meta["mu"]), float(meta["sigma"])
    stats = StandardizationStats(mu, sigma, meta["stats_mode"])
    count = int(meta["count"])
    plan = WindowPlan(int(meta["input_len"]), int(meta["output_len"]),
                      np.arange(count, dtype=np.int64),
                      int(meta["train_end"]), int(meta["val_end"]))
    return signal, plan, stats

