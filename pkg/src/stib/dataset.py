"""Raw spatiotemporal signals, graph topology, file I/O and synthetic data.

A signal is stored once, row-major as (time, node, feature), so any run of
consecutive time steps is a single contiguous slab of memory.
"""

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    GraphError,
    MalformedHeaderError,
    NonFiniteValueError,
    SignalFormatError,
    TruncatedPayloadError,
)

STB_MAGIC = b"STB1"
STB_VERSION = 1
# magic | u32 version | u64 entries | u64 nodes | u64 features | u8 dtype
_STB_HEADER = struct.Struct("<4sIQQQB")
STB_HEADER_SIZE = (_STB_HEADER.size + 7) // 8 * 8
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_WIDTH_TO_CODE = {8: 0, 4: 1}


@dataclass(frozen=True, eq=False)
class TemporalSignal:
    """Dense E x N x F time series of node features.

    The backing array is made read-only on construction. The only sanctioned
    mutation is :func:`stib.preprocess.standardize_in_place`.
    """

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise DimensionMismatchError("signal values must be a 3-d array (entries, nodes, features)")
        if min(v.shape) < 1:
            raise DimensionMismatchError(f"all signal dimensions must be >= 1, got {v.shape}")
        if v.dtype not in (np.float64, np.float32):
            raise DimensionMismatchError(f"unsupported dtype {v.dtype}; use float64 or float32")
        if not v.flags.c_contiguous:
            raise DimensionMismatchError("signal values must be C-contiguous")
        if not np.isfinite(v).all():
            bad = int(np.flatnonzero(~np.isfinite(v.ravel()))[0])
            raise NonFiniteValueError("signal contains non-finite values", offset=bad)
        v.flags.writeable = False

    @classmethod
    def from_array(cls, values, element_width=8):
        if element_width not in (4, 8):
            raise ValueError(f"element_width must be 4 or 8, got {element_width}")
        dtype = np.float64 if element_width == 8 else np.float32
        arr = np.array(values, dtype=dtype, order="C", copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr)

    @property
    def entries(self):
        return self.values.shape[0]

    @property
    def nodes(self):
        return self.values.shape[1]

    @property
    def features(self):
        return self.values.shape[2]

    @property
    def element_width(self):
        return self.values.itemsize

    @property
    def nbytes(self):
        return self.values.nbytes

    def copy(self):
        return TemporalSignal(self.values.copy())

    def __repr__(self):
        return (f"TemporalSignal(entries={self.entries}, nodes={self.nodes}, "
                f"features={self.features}, element_width={self.element_width})")


@dataclass(frozen=True, eq=False)
class GraphSpec:
    node_ids: tuple
    edges: tuple  # (from, to, distance) of the edges that survived thresholding
    weighted_adjacency: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = self.weighted_adjacency
        n = len(self.node_ids)
        if a.shape != (n, n):
            raise GraphError(f"adjacency shape {a.shape} does not match {n} nodes")
        if (a < 0).any() or (a > 1).any():
            raise GraphError("adjacency weights must lie in [0, 1]")
        a.flags.writeable = False

    @property
    def num_nodes(self):
        return len(self.node_ids)

    @classmethod
    def edgeless(cls, num_nodes):
        ids = tuple(str(i) for i in range(num_nodes))
        return cls(ids, (), np.eye(num_nodes))

    def random_walk(self):
        """Row-normalized transition matrix D^-1 A."""
        a = self.weighted_adjacency
        deg = a.sum(axis=1)
        # self-loops guarantee deg >= 1 for graphs from build_weighted_adjacency
        deg = np.where(deg > 0, deg, 1.0)
        return a / deg[:, None]


def build_weighted_adjacency(edges, node_ids, kernel_width=1.0, threshold=0.1):
    """Thresholded Gaussian kernel over edge distances, with unit self-loops.

    ``A[i, j] = exp(-d(i, j)**2 / kernel_width**2)`` when that is at least
    ``threshold``, otherwise 0. Repeated edges keep the shortest distance so
    the result does not depend on edge order.
    """
    if not kernel_width > 0:
        raise GraphError(f"kernel width must be positive, got {kernel_width}")
    if not 0 <= threshold < 1:
        raise GraphError(f"threshold must lie in [0, 1), got {threshold}")
    node_ids = tuple(node_ids)
    index = {nid: i for i, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise GraphError("duplicate node ids")
    n = len(node_ids)
    dist = np.full((n, n), np.inf)
    kept = []
    for src, dst, d in edges:
        try:
            i, j = index[src], index[dst]
        except KeyError as exc:
            raise GraphError(f"edge references unknown node id {exc.args[0]!r}") from None
        d = float(d)
        if not d >= 0 or math.isinf(d):
            raise GraphError(f"edge ({src!r}, {dst!r}) has invalid distance {d}")
        dist[i, j] = min(dist[i, j], d)
        kept.append((src, dst, d))
    with np.errstate(over="ignore"):
        a = np.exp(-np.square(dist / kernel_width))
    a[a < threshold] = 0.0
    kept = tuple(e for e in kept if a[index[e[0]], index[e[1]]] > 0)
    np.fill_diagonal(a, 1.0)
    return GraphSpec(node_ids, kept, a)


# --- file formats -----------------------------------------------------------

def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("stb", "csv"):
        return suffix
    raise ValueError(f"cannot infer signal format from {path!r}; pass format='stb' or 'csv'")


def load_signal(path, format=None, element_width=8):
    """Read a signal from an stb or header-free csv file.

    ``element_width`` only applies to csv; stb files carry their own dtype.
    """
    fmt = _infer_format(path, format)
    if fmt == "stb":
        return _load_stb(Path(path).read_bytes())
    if fmt == "csv":
        return _load_csv(path, element_width)
    raise ValueError(f"unknown signal format {fmt!r}")


def _load_stb(buf):
    if len(buf) < STB_HEADER_SIZE:
        raise MalformedHeaderError(f"file too short for stb header ({len(buf)} bytes)", offset=len(buf))
    magic, version, e, n, f, code = _STB_HEADER.unpack_from(buf, 0)
    if magic != STB_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}", offset=0)
    if version != STB_VERSION:
        raise MalformedHeaderError(f"unsupported stb version {version}", offset=4)
    for off, (name, dim) in zip((8, 16, 24), (("entries", e), ("nodes", n), ("features", f))):
        if dim < 1:
            raise MalformedHeaderError(f"{name} must be >= 1", offset=off)
    if code not in _DTYPE_CODES:
        raise MalformedHeaderError(f"unknown dtype code {code}", offset=32)
    dtype = _DTYPE_CODES[code]
    expected = e * n * f * dtype.itemsize
    payload = len(buf) - STB_HEADER_SIZE
    if payload < expected:
        raise TruncatedPayloadError(
            f"payload holds {payload} bytes, header implies {expected}", offset=len(buf))
    if payload > expected:
        raise DimensionMismatchError(
            f"{payload - expected} trailing bytes after declared payload",
            offset=STB_HEADER_SIZE + expected)
    flat = np.frombuffer(buf, dtype=dtype, count=e * n * f, offset=STB_HEADER_SIZE)
    finite = np.isfinite(flat)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteValueError("non-finite value in payload",
                                  offset=STB_HEADER_SIZE + bad * dtype.itemsize)
    values = flat.astype(dtype.newbyteorder("="), copy=True).reshape(e, n, f)
    return TemporalSignal(values)


def _load_csv(path, element_width):
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DimensionMismatchError(
                    f"row has {len(row)} columns, expected {width}", offset=lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise SignalFormatError(f"unparsable number in row {row!r}", offset=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise NonFiniteValueError("non-finite value", offset=lineno)
            rows.append(vals)
    if not rows:
        raise SignalFormatError("csv file contains no rows", offset=0)
    dtype = np.float64 if element_width == 8 else np.float32
    return TemporalSignal(np.asarray(rows, dtype=dtype)[:, :, None].copy())


def save_signal(signal, path, format="stb"):
    if format != "stb":
        raise ValueError("signals are only written as stb")
    values = signal.values
    code = _WIDTH_TO_CODE[values.itemsize]
    header = _STB_HEADER.pack(STB_MAGIC, STB_VERSION, *values.shape, code)
    header = header.ljust(STB_HEADER_SIZE, b"\0")
    payload = values.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_edges(path):
    """Read ``from,to,distance`` triples. A non-numeric first row is a header."""
    edges = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) != 3:
                raise GraphError(f"line {lineno}: expected from,to,distance")
            src, dst, d = (c.strip() for c in row)
            try:
                dist = float(d)
            except ValueError:
                if lineno == 0:
                    continue
                raise GraphError(f"line {lineno}: bad distance {d!r}") from None
            edges.append((src, dst, dist))
    return edges


# --- synthetic data ---------------------------------------------------------

def ring_with_chords(nodes, rng, chords=None):
    """Bidirectional ring plus random chords; distances drawn from [0.5, 1.5]."""
    if chords is None:
        chords = nodes // 4
    pairs = set()
    if nodes > 1:
        for i in range(nodes):
            j = (i + 1) % nodes
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    attempts = 0
    while nodes > 3 and chords > 0 and attempts < 50 * chords:
        attempts += 1
        i, j = (int(v) for v in rng.integers(0, nodes, size=2))
        pair = (min(i, j), max(i, j))
        if i == j or pair in pairs:
            continue
        pairs.add(pair)
        chords -= 1
    edges = []
    for i, j in sorted(pairs):
        d = float(rng.uniform(0.5, 1.5))
        edges.append((str(i), str(j), d))
        edges.append((str(j), str(i), d))
    return edges


def gen_synthetic(entries, nodes, features=1, seed=0, dynamics="diffusion", noise=0.1,
                  noise_corr=0.5):
    """Deterministic synthetic signal on a random ring-with-chords graph.

    ``diffusion`` evolves ``X(t+1) = A_rw X(t) + e(t)``; ``random_walk``
    evolves every node independently as ``X(t+1) = X(t) + e(t)``. The
    innovations e(t) are Gaussian with standard deviation ``noise`` and lag-one
    autocorrelation ``noise_corr`` (0 gives white noise).
    """
    if not 0 <= noise_corr < 1:
        raise ValueError(f"noise_corr must lie in [0, 1), got {noise_corr}")
    for name, val in (("entries", entries), ("nodes", nodes), ("features", features)):
        if int(val) < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    if dynamics not in ("diffusion", "random_walk"):
        raise ValueError(f"unknown dynamics {dynamics!r}")
    rng = np.random.default_rng(seed)
    node_ids = [str(i) for i in range(nodes)]
    graph = build_weighted_adjacency(ring_with_chords(nodes, rng), node_ids,
                                     kernel_width=1.0, threshold=0.1)
    p = graph.random_walk()
    x = np.empty((entries, nodes, features))
    x[0] = rng.standard_normal((nodes, features))
    shocks = noise * rng.standard_normal((entries - 1, nodes, features))
    if noise_corr > 0:
        scale = math.sqrt(1.0 - noise_corr ** 2)
        for t in range(1, entries - 1):
            shocks[t] = noise_corr * shocks[t - 1] + scale * shocks[t]
    for t in range(entries - 1):
        if dynamics == "diffusion":
            x[t + 1] = p @ x[t] + shocks[t]
        else:
            x[t + 1] = x[t] + shocks[t]
    return TemporalSignal(x), graph
