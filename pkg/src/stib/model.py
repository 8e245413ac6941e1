"""Sequence-to-sequence forecasters with hand-written reverse-mode gradients.

Both models emit one prediction per input step, so the output window has the
same length as the input window. Parameters live in one flat float64 vector;
models are stateless apart from hyperparameters and the graph operator.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from ._kv import read_kv, write_kv
from .dataset import TemporalSignal, load_signal, save_signal
from .errors import NonFiniteError, ShapeError


class ParamLayout:
    """Named slices of a flat parameter vector."""

    def __init__(self, spec):
        self.names = [name for name, _ in spec]
        self.shapes = dict(spec)
        self.offsets = {}
        off = 0
        for name, shape in spec:
            self.offsets[name] = off
            off += math.prod(shape)
        self.size = off

    def unpack(self, theta):
        if theta.shape != (self.size,):
            raise ShapeError(f"parameter vector has shape {theta.shape}, expected ({self.size},)")
        out = {}
        for name in self.names:
            off = self.offsets[name]
            shape = self.shapes[name]
            out[name] = theta[off:off + math.prod(shape)].reshape(shape)
        return out

    def zeros(self):
        return np.zeros(self.size)


def _sigmoid(a):
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def _as_batch(x, features):
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != features:
        raise ShapeError(f"expected input of shape (B, T, N, {features}), got {x.shape}")
    return x


def loss_mae(y_hat, y, stats=None, destandardize=False):
    """Mean absolute error over all elements, optionally in original units."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if destandardize:
        if stats is None:
            raise ValueError("destandardize requires stats")
        y_hat = stats.destandardize(y_hat)
        y = stats.destandardize(y)
    return float(np.mean(np.abs(y_hat - y)))


def _mae_grad(y_hat, y):
    r = y_hat - y
    loss = np.mean(np.abs(r))
    loss = float(loss) if loss.dtype == np.float64 else loss
    # subgradient 0 at exact ties
    return loss, np.sign(r) / r.size


class LinearSeq2Seq:
    """Per-node affine map ``y_hat(t) = x(t) @ W + b`` shared across nodes."""

    def __init__(self, features):
        self.features = features
        self.layout = ParamLayout([("W", (features, features)), ("b", (features,))])

    @property
    def n_params(self):
        return self.layout.size

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(self.features)
        return rng.uniform(-bound, bound, self.layout.size)

    def identity_params(self):
        theta = self.layout.zeros()
        self.layout.unpack(theta)["W"][...] = np.eye(self.features)
        return theta

    def forward(self, theta, x):
        squeeze = x.ndim == 3
        x = _as_batch(x, self.features)
        p = self.layout.unpack(theta)
        y_hat = x @ p["W"] + p["b"]
        return y_hat[0] if squeeze else y_hat

    def forward_backward(self, theta, x, y):
        x = _as_batch(x, self.features)
        y = _as_batch(y, self.features)
        if y.shape != x.shape:
            raise ShapeError(f"target shape {y.shape} != input shape {x.shape}")
        p = self.layout.unpack(theta)
        y_hat = x @ p["W"] + p["b"]
        loss, g = _mae_grad(y_hat, y)
        grad = np.zeros(self.layout.size, dtype=y_hat.dtype)
        gp = self.layout.unpack(grad)
        f = self.features
        gp["W"][...] = x.reshape(-1, f).T @ g.reshape(-1, f)
        gp["b"][...] = g.reshape(-1, f).sum(axis=0)
        return loss, grad, y_hat

    def backward(self, theta, x, y):
        loss, grad, _ = self.forward_backward(theta, x, y)
        return loss, grad


class GCGRU:
    """One graph-convolutional GRU layer with a linear read-out.

    Each gate sees the diffusion features ``[Z, P Z, ..., P^(K-1) Z]`` of its
    input ``Z``, where ``P`` is the random-walk matrix of the graph:

        r, u = sigmoid(D([x, h]) @ W_gate + b_gate)
        c    = tanh(D([x, r * h]) @ W_cand + b_cand)
        h'   = u * h + (1 - u) * c
        y    = h' @ W_out + b_out
    """

    def __init__(self, graph, features, hidden=16, order=2):
        if order < 1:
            raise ValueError("diffusion order must be >= 1")
        self.graph = graph
        self.features = features
        self.hidden = hidden
        self.order = order
        self.nodes = graph.num_nodes
        p = graph.random_walk()
        powers = []
        cur = np.eye(self.nodes)
        for _ in range(1, order):
            cur = p @ cur
            powers.append(cur)
        self._powers = powers
        self._powers_t = [np.ascontiguousarray(m.T) for m in powers]
        c = features + hidden
        self._in = c
        kc = order * c
        self.layout = ParamLayout([
            ("W_gate", (kc, 2 * hidden)), ("b_gate", (2 * hidden,)),
            ("W_cand", (kc, hidden)), ("b_cand", (hidden,)),
            ("W_out", (hidden, features)), ("b_out", (features,)),
        ])
        self._fan_in = {"W_gate": kc, "b_gate": kc, "W_cand": kc, "b_cand": kc,
                        "W_out": hidden, "b_out": hidden}

    @property
    def n_params(self):
        return self.layout.size

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        theta = self.layout.zeros()
        p = self.layout.unpack(theta)
        for name in self.layout.names:
            bound = 1.0 / math.sqrt(self._fan_in[name])
            p[name][...] = rng.uniform(-bound, bound, self.layout.shapes[name])
        return theta

    # Internally states are node-major, (N, B, C), so a diffusion step is one
    # (N, N) @ (N, B*C) product and a gate is one (N*B, K*C) @ (K*C, .) product.

    def _diffuse(self, z):
        if not self._powers:
            return z
        flat = z.reshape(self.nodes, -1)
        parts = [z] + [(m @ flat).reshape(z.shape) for m in self._powers]
        return np.concatenate(parts, axis=-1)

    def _diffuse_adjoint(self, dd):
        c = self._in
        dz = dd[..., :c].copy()
        shape = dz.shape
        for k, mt in enumerate(self._powers_t, start=1):
            dz += (mt @ np.ascontiguousarray(dd[..., k * c:(k + 1) * c]).reshape(self.nodes, -1)
                   ).reshape(shape)
        return dz

    def _check(self, x):
        squeeze = x.ndim == 3
        x = _as_batch(x, self.features)
        if x.shape[2] != self.nodes:
            raise ShapeError(f"input has {x.shape[2]} nodes, graph has {self.nodes}")
        return x, squeeze

    def _run(self, p, x, keep):
        b, t_len, n, f = x.shape
        hd = self.hidden
        kc = self.order * self._in
        dtype = np.result_type(p["W_gate"], x)
        xs = np.ascontiguousarray(x.transpose(1, 2, 0, 3))  # (T, N, B, F)
        h = np.zeros((n, b, hd), dtype=dtype)
        out = np.empty((t_len, n, b, f), dtype=dtype)
        caches = []
        for t in range(t_len):
            xt = xs[t]
            dg = self._diffuse(np.concatenate([xt, h], axis=-1)).reshape(-1, kc)
            gates = _sigmoid(dg @ p["W_gate"] + p["b_gate"]).reshape(n, b, 2 * hd)
            r, u = gates[..., :hd], gates[..., hd:]
            dc = self._diffuse(np.concatenate([xt, r * h], axis=-1)).reshape(-1, kc)
            c = np.tanh(dc @ p["W_cand"] + p["b_cand"]).reshape(n, b, hd)
            h_new = u * h + (1.0 - u) * c
            out[t] = (h_new.reshape(-1, hd) @ p["W_out"] + p["b_out"]).reshape(n, b, f)
            if keep:
                caches.append((h, dg, r, u, dc, c, h_new))
            h = h_new
        return out.transpose(2, 0, 1, 3), caches

    def forward(self, theta, x):
        x, squeeze = self._check(x)
        out, _ = self._run(self.layout.unpack(theta), x, keep=False)
        out = np.ascontiguousarray(out)
        return out[0] if squeeze else out

    def forward_backward(self, theta, x, y):
        x, _ = self._check(x)
        y = _as_batch(y, self.features)
        if y.shape != x.shape:
            raise ShapeError(f"target shape {y.shape} != input shape {x.shape}; "
                             "GCGRU needs output_len == input_len")
        p = self.layout.unpack(theta)
        y_hat, caches = self._run(p, x, keep=True)
        y_hat = np.ascontiguousarray(y_hat)
        loss, g = _mae_grad(y_hat, y)
        g = np.ascontiguousarray(g.transpose(1, 2, 0, 3))  # (T, N, B, F)

        grad = np.zeros(self.layout.size, dtype=y_hat.dtype)
        gp = self.layout.unpack(grad)
        hd, f = self.hidden, self.features
        dh_next = np.zeros_like(caches[0][0])
        for t in range(x.shape[1] - 1, -1, -1):
            h, dg, r, u, dc, c, h_new = caches[t]
            gy = g[t].reshape(-1, f)
            gp["W_out"] += h_new.reshape(-1, hd).T @ gy
            gp["b_out"] += gy.sum(axis=0)
            dh_new = dh_next + (gy @ p["W_out"].T).reshape(h.shape)

            du = dh_new * (h - c)
            dcand = dh_new * (1.0 - u)
            dh = dh_new * u

            da_c = (dcand * (1.0 - c * c)).reshape(-1, hd)
            gp["W_cand"] += dc.T @ da_c
            gp["b_cand"] += da_c.sum(axis=0)
            dz_c = self._diffuse_adjoint((da_c @ p["W_cand"].T).reshape(*h.shape[:2], -1))
            drh = dz_c[..., f:]
            dr = drh * h
            dh += drh * r

            da_g = np.concatenate([dr * r * (1.0 - r), du * u * (1.0 - u)],
                                  axis=-1).reshape(-1, 2 * hd)
            gp["W_gate"] += dg.T @ da_g
            gp["b_gate"] += da_g.sum(axis=0)
            dz_g = self._diffuse_adjoint((da_g @ p["W_gate"].T).reshape(*h.shape[:2], -1))
            dh += dz_g[..., f:]
            dh_next = dh
        return loss, grad, y_hat

    def backward(self, theta, x, y):
        loss, grad, _ = self.forward_backward(theta, x, y)
        return loss, grad


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "gcgru"
    hidden: int = 16
    order: int = 2
    lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gcgru", "linear"):
            raise ValueError(f"unknown model kind {self.kind!r}")


def build_model(config, graph, features):
    if config.kind == "linear":
        return LinearSeq2Seq(features)
    return GCGRU(graph, features, hidden=config.hidden, order=config.order)


# --- optimizer ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, n_params, lr=1e-2, **kw):
        return cls(lr=lr, m=np.zeros(n_params), v=np.zeros(n_params), **kw)


def adam_step(state, theta, grad):
    """One bias-corrected Adam update. Returns ``(theta, state)``; inputs are not modified."""
    if not (theta.shape == grad.shape == state.m.shape):
        raise ShapeError(f"theta {theta.shape}, grad {grad.shape} and moments "
                         f"{state.m.shape} disagree")
    finite = np.isfinite(grad)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"non-finite gradient at coordinate {bad}: {grad[bad]}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta, replace(state, m=m, v=v, step=t)


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(theta, config, stem, extra=None):
    """Write ``<stem>.stb`` (theta as an n x 1 x 1 signal) and ``<stem>.meta``."""
    save_signal(TemporalSignal(np.ascontiguousarray(theta, dtype=np.float64).reshape(-1, 1, 1)),
                f"{stem}.stb")
    meta = {"format": "stib-checkpoint/1", "n_params": theta.size,
            "kind": config.kind, "hidden": config.hidden, "order": config.order,
            "lr": repr(config.lr), "seed": config.seed}
    meta.update(extra or {})
    write_kv(f"{stem}.meta", meta)


def load_checkpoint(stem):
    meta = read_kv(f"{stem}.meta")
    theta = load_signal(f"{stem}.stb", format="stb").values.reshape(-1).copy()
    config = ModelConfig(kind=meta["kind"], hidden=int(meta["hidden"]),
                         order=int(meta["order"]), lr=float(meta["lr"]), seed=int(meta["seed"]))
    return theta, config, meta
