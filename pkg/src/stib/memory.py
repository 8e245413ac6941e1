"""Closed-form footprint estimators and live allocation accounting.

Two storage layouts are modeled for a signal of E entries, N nodes and F
features with horizon h (input and output windows both h steps):

* materialized: every window's x and y slices stacked as copies,
  ``2 * (E - (2h - 1)) * h * N * F`` elements;
* index: one copy of the signal plus one 8-byte start index per window,
  ``E * N * F`` elements and ``E - (2h - 1)`` indices.
"""

import csv
import io
import threading
from collections import OrderedDict
from dataclasses import dataclass

INDEX_WIDTH = 8


@dataclass(frozen=True)
class SizeEstimate:
    entries: int
    nodes: int
    features: int
    horizon: int
    element_width: int
    materialized_elements: int
    index_data_elements: int
    index_count: int

    @property
    def materialized_bytes(self):
        return self.materialized_elements * self.element_width

    @property
    def index_data_bytes(self):
        return self.index_data_elements * self.element_width

    @property
    def index_overhead_bytes(self):
        return self.index_count * INDEX_WIDTH

    @property
    def index_bytes(self):
        return self.index_data_bytes + self.index_overhead_bytes

    @property
    def reduction_fraction(self):
        return 1.0 - self.index_bytes / self.materialized_bytes

    def render(self):
        return (f"materialized {self.materialized_elements} elements = "
                f"{self.materialized_bytes} B ({format_decimal(self.materialized_bytes)}, "
                f"{format_binary(self.materialized_bytes)}); index "
                f"{self.index_data_elements} elements + {self.index_count} indices = "
                f"{self.index_bytes} B ({format_decimal(self.index_bytes)}, "
                f"{format_binary(self.index_bytes)}); reduction "
                f"{100 * self.reduction_fraction:.2f}%")


def estimate(entries, nodes, features, horizon, element_width=8):
    for name, val in (("entries", entries), ("nodes", nodes), ("features", features),
                      ("horizon", horizon), ("element_width", element_width)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val!r}")
    if entries < 2 * horizon:
        raise ValueError(f"entries={entries} < 2*horizon={2 * horizon}: no complete window")
    count = entries - (2 * horizon - 1)
    return SizeEstimate(
        entries=entries, nodes=nodes, features=features, horizon=horizon,
        element_width=element_width,
        materialized_elements=2 * count * horizon * nodes * features,
        index_data_elements=entries * nodes * features,
        index_count=count,
    )


_DECIMAL = [("B", 1), ("KB", 10**3), ("MB", 10**6), ("GB", 10**9), ("TB", 10**12)]
_BINARY = [("B", 1), ("KiB", 2**10), ("MiB", 2**20), ("GiB", 2**30), ("TiB", 2**40)]


def _format(nbytes, units, digits):
    name, scale = units[0]
    for unit in units:
        if nbytes >= unit[1]:
            name, scale = unit
    return f"{nbytes / scale:.{digits}f} {name}"


def format_decimal(nbytes, digits=2):
    return _format(nbytes, _DECIMAL, digits)


def format_binary(nbytes, digits=2):
    return _format(nbytes, _BINARY, digits)


def matches_either_unit(nbytes, value, unit, rel_tol=0.01):
    """True if ``nbytes`` equals ``value`` in ``unit`` read as decimal or binary."""
    unit = unit.upper().rstrip("B").rstrip("I")
    power = {"": 0, "K": 1, "M": 2, "G": 3, "T": 4}[unit]
    for scale in (1000 ** power, 1024 ** power):
        if abs(nbytes / scale - value) <= rel_tol * value:
            return True
    return False


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    entries: int
    nodes: int
    features: int
    horizon: int
    reported_after: tuple  # (value, unit) reference size
    reported_before: tuple


# Shape parameters of the public benchmark datasets. Raw files hold one
# feature; the traffic sets gain a day-of-week feature during preprocessing.
PRESETS = OrderedDict((p.name, p) for p in [
    DatasetPreset("chickenpox-hungary", 522, 20, 1, 4, (657.92, "KB"), (83.36, "KB")),
    DatasetPreset("windmill-large", 17472, 319, 1, 8, (712.80, "MB"), (44.59, "MB")),
    DatasetPreset("metr-la", 34272, 207, 2, 12, (2.54, "GB"), (54.39, "MB")),
    DatasetPreset("pems-bay", 52105, 325, 2, 12, (6.05, "GB"), (129.62, "MB")),
    DatasetPreset("pems-all-la", 105120, 2716, 2, 12, (102.08, "GB"), (2.12, "GB")),
    DatasetPreset("pems", 105120, 11160, 2, 12, (419.46, "GB"), (8.71, "GB")),
])


def preset_estimate(name, element_width=8):
    p = PRESETS[name]
    return estimate(p.entries, p.nodes, p.features, p.horizon, element_width)


class AllocLedger:
    """Per-stage counters of bytes allocated and elements copied.

    Counters only grow. Increments are serialized by a lock so several
    simulated workers may share one ledger.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._bytes = OrderedDict()
        self._copies = OrderedDict()

    def add(self, stage, nbytes=0, copies=0):
        if nbytes < 0 or copies < 0:
            raise ValueError("ledger counters are monotone; negative increment")
        with self._lock:
            self._bytes[stage] = self._bytes.get(stage, 0) + int(nbytes)
            self._copies[stage] = self._copies.get(stage, 0) + int(copies)

    def bytes(self, stage):
        return self._bytes.get(stage, 0)

    def copies(self, stage):
        return self._copies.get(stage, 0)

    @property
    def stages(self):
        return list(self._bytes)

    def merge(self, other):
        for stage in other.stages:
            self.add(stage, other.bytes(stage), other.copies(stage))

    def backing_bytes(self):
        """Bytes held for the whole run by the data representation.

        The index layout is ``data`` + ``index``; the materialized layout is
        ``preprocess`` (its retained raw copy is counted under ``raw``).
        """
        return self.bytes("data") + self.bytes("index") + self.bytes("preprocess")

    def total_bytes(self):
        return sum(self._bytes.values())

    def total_copies(self):
        return sum(self._copies.values())


@dataclass(frozen=True)
class LedgerReport:
    stages: tuple  # (stage, bytes, copies)
    backing_bytes: int
    total_bytes: int
    total_copies: int

    def csv_rows(self):
        rows = [("stage", "bytes", "copies")]
        rows.extend((s, b, c) for s, b, c in self.stages)
        rows.append(("backing", self.backing_bytes, ""))
        rows.append(("total", self.total_bytes, self.total_copies))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows())
        return buf.getvalue()

    def __str__(self):
        width = max([len(s) for s, _, _ in self.stages] + [7])
        lines = [f"{'stage':<{width}}  {'bytes':>16}  {'copies':>14}"]
        for s, b, c in self.stages:
            lines.append(f"{s:<{width}}  {b:>16}  {c:>14}   {format_binary(b)}")
        lines.append(f"{'backing':<{width}}  {self.backing_bytes:>16}  {'':>14}   "
                     f"{format_binary(self.backing_bytes)}")
        return "\n".join(lines)


def ledger_report(ledger):
    stages = tuple((s, ledger.bytes(s), ledger.copies(s)) for s in ledger.stages)
    return LedgerReport(stages, ledger.backing_bytes(), ledger.total_bytes(),
                        ledger.total_copies())
