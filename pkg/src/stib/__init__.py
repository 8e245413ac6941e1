"""Index-batching for spatiotemporal sequence-to-sequence training.

One standardized copy of the signal plus an array of window start indices
replaces the stacked copies of every (x, y) window. The classic materialized
pipeline is kept alongside as an oracle.
"""

__version__ = "0.1.0"

from .batching import (
    Batch,
    IndexSource,
    MaterializedSource,
    ShuffleSpec,
    batch_ordinals,
    batches,
    epoch_permutation,
    local_batch_permutation,
    prepare_source,
)
from .dataset import (
    GraphSpec,
    TemporalSignal,
    build_weighted_adjacency,
    gen_synthetic,
    load_signal,
    save_signal,
)
from .distsim import DistPlan, allreduce_mean, run_distributed, shard_epoch
from .memory import PRESETS, AllocLedger, estimate, preset_estimate
from .model import GCGRU, LinearSeq2Seq, ModelConfig, adam_step, loss_mae
from .preprocess import (
    WindowPlan,
    build_materialized,
    compute_stats,
    plan_windows,
    snapshot,
    standardize_in_place,
)

__all__ = [
    "AllocLedger",
    "Batch",
    "DistPlan",
    "GCGRU",
    "GraphSpec",
    "IndexSource",
    "LinearSeq2Seq",
    "MaterializedSource",
    "ModelConfig",
    "PRESETS",
    "ShuffleSpec",
    "TemporalSignal",
    "WindowPlan",
    "adam_step",
    "allreduce_mean",
    "batch_ordinals",
    "batches",
    "build_materialized",
    "build_weighted_adjacency",
    "compute_stats",
    "epoch_permutation",
    "estimate",
    "gen_synthetic",
    "load_signal",
    "local_batch_permutation",
    "loss_mae",
    "plan_windows",
    "prepare_source",
    "preset_estimate",
    "run_distributed",
    "save_signal",
    "shard_epoch",
    "snapshot",
    "standardize_in_place",
]
