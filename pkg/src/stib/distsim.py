"""Deterministic data-parallel training simulator.

K simulated workers step in lockstep. Each computes a gradient on its own
batch, the gradients are averaged by a fixed-order all-reduce, and every
replica applies the same Adam update. Three data placements are modeled:

``replicated``
    every worker holds the whole standardized signal; a shared-seed global
    shuffle needs no communication.
``partitioned``
    worker w permanently owns the w-th contiguous block of training windows,
    frozen into batches whose order is reshuffled each epoch.
``on_demand``
    data is partitioned as above but batches follow the global shuffle, so
    windows owned by other workers are fetched and charged as remote bytes.
"""

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .batching import ShuffleSpec, epoch_permutation, local_batch_permutation
from .errors import ConfigError, NonFiniteError, ShapeError
from .memory import AllocLedger
from .model import AdamState, adam_step, build_model

log = logging.getLogger(__name__)

PLACEMENTS = ("replicated", "partitioned", "on_demand")
_SHUFFLE_FOR = {"replicated": "global", "partitioned": "local_batch", "on_demand": "global"}


@dataclass(frozen=True)
class DistPlan:
    workers: int = 1
    per_worker_batch: int = 32
    placement: str = "replicated"
    shuffle: str = None
    base_seed: int = 0
    epochs: int = 1

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        expected = _SHUFFLE_FOR[self.placement]
        if self.shuffle is None:
            object.__setattr__(self, "shuffle", expected)
        elif self.shuffle != expected:
            raise ConfigError(f"placement {self.placement!r} requires shuffle {expected!r}, "
                              f"got {self.shuffle!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.per_worker_batch < 1:
            raise ConfigError("per_worker_batch must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def global_batch(self):
        return self.workers * self.per_worker_batch

    @property
    def shuffle_spec(self):
        return ShuffleSpec(self.shuffle, self.base_seed)


def steps_per_epoch(plan, dist):
    n = plan.train_end
    steps = n // dist.global_batch
    if steps < 1:
        raise ConfigError(f"{n} training windows cannot fill one global batch of "
                          f"{dist.workers} x {dist.per_worker_batch}")
    return steps


def shard_epoch(plan, dist, epoch):
    """Ordered training ordinals of each worker for one epoch.

    Worker w's j-th batch is ``shards[w][j*B:(j+1)*B]``. Under the global
    shuffle the permutation is truncated to whole global batches and every
    global batch is split contiguously across workers, so step j of all
    workers together consumes exactly permutation[j*K*B:(j+1)*K*B].
    """
    k, b = dist.workers, dist.per_worker_batch
    steps = steps_per_epoch(plan, dist)
    if dist.placement == "partitioned":
        order = local_batch_permutation(dist.shuffle_spec, epoch, steps)
        owned = partition_bounds(plan, dist)
        return [np.arange(lo, hi, dtype=np.int64).reshape(steps, b)[order].ravel()
                for lo, hi in owned]
    perm = epoch_permutation(dist.shuffle_spec, epoch, plan.train_end)
    grid = perm[:steps * k * b].reshape(steps, k, b)
    return [np.ascontiguousarray(grid[:, w, :]).ravel() for w in range(k)]


def partition_bounds(plan, dist):
    """Window ranges [lo, hi) each worker stores locally.

    Partitioned placement keeps whole-batch blocks of equal size; on-demand
    placement splits all training windows as evenly as possible.
    """
    k = dist.workers
    if dist.placement == "partitioned":
        m = steps_per_epoch(plan, dist) * dist.per_worker_batch
        return [(w * m, (w + 1) * m) for w in range(k)]
    n = plan.train_end
    edges = [w * (n // k) + min(w, n % k) for w in range(k + 1)]
    return list(zip(edges[:-1], edges[1:]))


def window_owners(plan, dist):
    """Owning worker of every training window (-1 when no worker owns it)."""
    owners = np.full(plan.train_end, -1, dtype=np.int64)
    for w, (lo, hi) in enumerate(partition_bounds(plan, dist)):
        owners[lo:hi] = w
    return owners


class CommLedger:
    """Per-epoch communication counters."""

    FIELDS = ("data_bytes_fetched_remote", "gradient_bytes_reduced", "allreduce_calls")

    def __init__(self):
        self._lock = threading.Lock()
        self.epochs = {}
        self._current = None

    def begin_epoch(self, epoch):
        with self._lock:
            self.epochs.setdefault(epoch, dict.fromkeys(self.FIELDS, 0))
            self._current = epoch

    def _bump(self, name, amount):
        with self._lock:
            if self._current is None:
                self.epochs.setdefault(0, dict.fromkeys(self.FIELDS, 0))
                self._current = 0
            self.epochs[self._current][name] += int(amount)

    def add_remote(self, nbytes):
        self._bump("data_bytes_fetched_remote", nbytes)

    def add_reduce(self, nbytes):
        self._bump("gradient_bytes_reduced", nbytes)
        self._bump("allreduce_calls", 1)

    def get(self, epoch, name):
        return self.epochs.get(epoch, {}).get(name, 0)

    def total(self, name):
        return sum(e[name] for e in self.epochs.values())


def allreduce_mean(grads, comm=None):
    """Average of per-worker gradients, summed in ascending rank order."""
    if not grads:
        raise ValueError("no gradients to reduce")
    shape = grads[0].shape
    for w, g in enumerate(grads):
        if g.shape != shape:
            raise ShapeError(f"worker {w} gradient has shape {g.shape}, expected {shape}")
    acc = grads[0].copy()
    for g in grads[1:]:
        acc += g
    acc /= len(grads)
    if comm is not None:
        comm.add_reduce(len(grads) * acc.size * acc.itemsize)
    return acc


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    split: str
    mae: float
    steps: int
    data_bytes_remote: int
    grad_bytes: int
    wall_ms: float


@dataclass
class DistResult:
    theta: np.ndarray
    metrics: list
    comm: CommLedger
    alloc: AllocLedger
    step_losses: list = field(default_factory=list)

    def final(self, split="val"):
        rows = [m for m in self.metrics if m.split == split]
        return rows[-1].mae if rows else float("nan")

    def series(self, split="val"):
        return [(m.epoch, m.mae) for m in self.metrics if m.split == split]


def worker_threads(workers):
    """Simulator thread count: one per worker, capped by STIB_WORKER_THREADS."""
    cap = os.environ.get("STIB_WORKER_THREADS")
    if cap:
        try:
            cap = int(cap)
        except ValueError:
            raise ConfigError(f"STIB_WORKER_THREADS must be an integer, got {cap!r}") from None
        if cap < 1:
            raise ConfigError("STIB_WORKER_THREADS must be >= 1")
        return min(workers, cap)
    return workers


def _window_bytes(source):
    plan = source.plan
    return plan.window_len * source.nodes * source.features * source.element_width


def _local_data_bytes(source, dist):
    """Bytes of window data each worker keeps resident."""
    plan = source.plan
    row = source.nodes * source.features * source.element_width
    if dist.placement == "replicated":
        if source.kind == "index":
            one = source.signal.nbytes + plan.starts.nbytes
        else:
            one = source.dataset.nbytes
        return [one] * dist.workers
    out = []
    for lo, hi in partition_bounds(plan, dist):
        if source.kind == "index":
            out.append((hi - 1 + plan.window_len - lo) * row + (hi - lo) * 8)
        else:
            out.append((hi - lo) * plan.window_len * row)
    return out


def evaluate(model, theta, source, split="val", batch_size=256):
    """Destandardized MAE of ``theta`` over a whole split, in ordinal order."""
    lo, hi = source.plan.split_range(split)
    if hi <= lo:
        return float("nan")
    stats = source.stats
    total = 0.0
    count = 0
    for start in range(lo, hi, batch_size):
        ords = np.arange(start, min(start + batch_size, hi), dtype=np.int64)
        x, y = source.gather(ords)
        y_hat = model.forward(theta, x)
        err = np.abs(stats.destandardize(y_hat) - stats.destandardize(y))
        total += float(err.sum())
        count += err.size
    return total / count


def run_distributed(source, graph, dist, model_config, eval_batch=256, threads=None):
    """Train with ``dist.workers`` simulated workers; see the module docstring.

    ``source`` is an :class:`~stib.batching.IndexSource` or
    :class:`~stib.batching.MaterializedSource`. Returns a :class:`DistResult`
    with rank 0's final parameters, per-epoch metrics (epoch 0 is the initial
    model), and the communication and allocation ledgers.
    """
    plan = source.plan
    if plan.split_size("train") < 1:
        raise ConfigError("training split is empty")
    k, b = dist.workers, dist.per_worker_batch
    steps = steps_per_epoch(plan, dist) if dist.epochs > 0 else 0
    if source.ledger is None:
        source.ledger = AllocLedger()
    alloc = source.ledger
    for nbytes in _local_data_bytes(source, dist):
        alloc.add("worker_data", nbytes, 0)

    model = build_model(model_config, graph, source.features)
    theta0 = model.init_params(model_config.seed)
    replicas = [theta0.copy() for _ in range(k)]
    states = [AdamState.initial(model.n_params, lr=model_config.lr) for _ in range(k)]
    owners = window_owners(plan, dist) if dist.placement == "on_demand" else None
    window_bytes = _window_bytes(source)
    stats = source.stats
    comm = CommLedger()
    metrics = []
    step_losses = []

    n_threads = threads if threads is not None else worker_threads(k)
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None

    def work(w, ords):
        x, y = source.gather(ords)
        loss, grad, y_hat = model.forward_backward(replicas[w], x, y)
        abs_err = float(np.abs(stats.destandardize(y_hat) - stats.destandardize(y)).sum())
        remote = int(np.count_nonzero(owners[ords] != w)) if owners is not None else 0
        return loss, grad, abs_err, y.size, remote

    try:
        t0 = time.perf_counter()
        comm.begin_epoch(0)
        val0 = evaluate(model, replicas[0], source, "val", eval_batch)
        metrics.append(EpochMetrics(0, "val", val0, 0, 0, 0, (time.perf_counter() - t0) * 1e3))

        for epoch in range(1, dist.epochs + 1):
            t0 = time.perf_counter()
            comm.begin_epoch(epoch)
            shards = shard_epoch(plan, dist, epoch)
            err_sum = 0.0
            err_n = 0
            for s in range(steps):
                batch = [shards[w][s * b:(s + 1) * b] for w in range(k)]
                if pool is None:
                    results = [work(w, batch[w]) for w in range(k)]
                else:
                    results = list(pool.map(work, range(k), batch))
                losses = [r[0] for r in results]
                if not all(np.isfinite(losses)):
                    bad = next(w for w, v in enumerate(losses) if not np.isfinite(v))
                    raise NonFiniteError(f"non-finite loss on worker {bad} at epoch {epoch}, "
                                         f"step {s}")
                step_losses.append(sum(losses) / k)
                comm.add_remote(sum(r[4] for r in results) * window_bytes)
                err_sum += sum(r[2] for r in results)
                err_n += sum(r[3] for r in results)
                avg = allreduce_mean([r[1] for r in results], comm)
                for w in range(k):
                    replicas[w], states[w] = adam_step(states[w], replicas[w], avg)
            for w in range(1, k):
                if not np.array_equal(replicas[w], replicas[0]):
                    raise RuntimeError(f"replica {w} diverged from rank 0 at epoch {epoch}")
            train_ms = (time.perf_counter() - t0) * 1e3
            metrics.append(EpochMetrics(
                epoch, "train", err_sum / err_n, steps,
                comm.get(epoch, "data_bytes_fetched_remote"),
                comm.get(epoch, "gradient_bytes_reduced"), train_ms))
            # replicas are bitwise identical, so rank 0 stands in for every worker
            val = evaluate(model, replicas[0], source, "val", eval_batch)
            metrics.append(EpochMetrics(epoch, "val", val, 0, 0, 0,
                                        (time.perf_counter() - t0) * 1e3 - train_ms))
            log.info("epoch %d train_mae=%.6g val_mae=%.6g", epoch, err_sum / err_n, val)
    finally:
        if pool is not None:
            pool.shutdown()
    return DistResult(replicas[0], metrics, comm, alloc, step_losses)
