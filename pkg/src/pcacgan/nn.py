"""Tape-based reverse-mode autodiff, parameters, Adam and checkpoints.

Only the handful of primitives the codec needs are provided. Values are
float64 while on the tape; parameters are stored as float32.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import sparse
from .errors import DetachedLoss, ShapeMismatch, VersionMismatch


class Parameter:
    __slots__ = ("id", "value", "grad")

    def __init__(self, id, value):
        self.id = id
        self.value = value
        self.grad = np.zeros(value.shape, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()

    def add(self, id, value):
        if id in self._params:
            raise KeyError(f"duplicate parameter id {id!r}")
        p = Parameter(id, np.array(value, dtype=self.dtype))
        self._params[id] = p
        return p

    def __getitem__(self, id):
        return self._params[id]

    def __contains__(self, id):
        return id in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def ids(self):
        return list(self._params)

    def subset(self, prefix):
        return [p for p in self if p.id.startswith(prefix)]

    def zero_grad(self):
        for p in self:
            p.grad[...] = 0.0

    def copy(self, dtype=None):
        out = ParamStore(self.dtype if dtype is None else dtype)
        for p in self:
            out.add(p.id, p.value)
        return out

    def load_values(self, other):
        """Copy values from ``other`` (same ids and shapes)."""
        _check_compatible(self, other)
        for p in self:
            p.value[...] = other[p.id].value

    def digest(self, prefix=""):
        """SHA-256 over ids and raw values of parameters under ``prefix``."""
        h = hashlib.sha256()
        for p in self:
            if p.id.startswith(prefix):
                h.update(p.id.encode())
                h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def equals(self, other):
        return (self.ids() == other.ids()
                and all(np.array_equal(p.value, other[p.id].value) for p in self))


# ---------------------------------------------------------------------- tape


class Node:
    __slots__ = ("value", "tape", "index", "requires_grad", "grad", "param")

    def __init__(self, value, tape, index, requires_grad, param=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.grad = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape}, grad={self.requires_grad})"


@dataclass
class _Entry:
    kind: str
    node: Node
    parents: tuple
    backward: object


class Tape:
    """Records primitive ops in execution order; :meth:`backward` replays them in reverse."""

    def __init__(self, training=False, rng=None):
        self.entries = []
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._param_nodes = {}

    def _new(self, kind, value, parents=(), backward=None, requires_grad=None, param=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(np.asarray(value, dtype=np.float64), self, len(self.entries), requires_grad, param)
        self.entries.append(_Entry(kind, node, tuple(parents), backward))
        return node

    def constant(self, value):
        return self._new("constant", value, requires_grad=False)

    def variable(self, value):
        """Leaf that collects a gradient (read it from ``node.grad`` after backward)."""
        return self._new("variable", value, requires_grad=True)

    def param(self, p):
        node = self._param_nodes.get(p.id)
        if node is None:
            node = self._new("param", p.value, requires_grad=True, param=p)
            self._param_nodes[p.id] = node
        return node

    def record(self, kind, value, parents, backward):
        for p in parents:
            if p.tape is not self:
                raise DetachedLoss(f"{kind}: input recorded on a different tape")
        return self._new(kind, value, parents, backward)

    def backward(self, loss):
        if not isinstance(loss, Node) or loss.tape is not self:
            raise DetachedLoss("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ShapeMismatch(f"loss must be a scalar, got shape {loss.value.shape}")
        for e in self.entries:
            e.node.grad = None
        loss.grad = np.ones_like(loss.value)
        for e in reversed(self.entries[: loss.index + 1]):
            node = e.node
            if node.grad is None or not node.requires_grad:
                continue
            if e.backward is None:
                if node.param is not None:
                    node.param.grad += node.grad
                continue
            grads = e.backward(node.grad)
            for parent, g in zip(e.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if g.shape != parent.value.shape:
                    g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a, b):
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    return a.tape.record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c):
    c = float(c)
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    return a.tape.record("add_scalar", a.value + float(c), (a,), lambda g: (g,))


def matmul(a, b):
    av, bv = a.value, b.value
    return a.tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(x, b):
    return x.tape.record("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def relu(x):
    mask = x.value > 0
    return x.tape.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = _sigmoid(x.value)
    return x.tape.record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log(x):
    v = x.value
    return x.tape.record("log", np.log(v), (x,), lambda g: (g / v,))


def exp(x):
    v = np.exp(x.value)
    return x.tape.record("exp", v, (x,), lambda g: (g * v,))


def concat_rows(nodes):
    """Stack nodes along axis 0."""
    nodes = list(nodes)
    sizes = np.cumsum([0] + [n.value.shape[0] for n in nodes])

    def back(g):
        return tuple(g[sizes[k]:sizes[k + 1]] for k in range(len(nodes)))

    return nodes[0].tape.record("concat_rows", np.concatenate([n.value for n in nodes]), tuple(nodes), back)


def mean_of(nodes):
    """Arithmetic mean of same-shaped nodes."""
    nodes = list(nodes)
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return scale(total, 1.0 / len(nodes))


def clamp(x, lo, hi):
    inside = (x.value >= lo) & (x.value <= hi)
    return x.tape.record("clamp", np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def square(x):
    v = x.value
    return x.tape.record("square", v * v, (x,), lambda g: (2.0 * g * v,))


def sum_all(x):
    shape = x.value.shape
    return x.tape.record("sum", np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x):
    shape = x.value.shape
    n = max(x.value.size, 1)
    return x.tape.record("mean", np.sum(x.value) / n, (x,), lambda g: (np.broadcast_to(g / n, shape),))


def index_rows(x, idx):
    """Gather rows ``x[idx]``; the backward pass scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.value.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record("index_rows", x.value[idx], (x,), back)


def slice_cols(x, start, stop):
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return x.tape.record("slice_cols", x.value[:, start:stop], (x,), back)


def segment_mean(x, segments, n_segments):
    """Row means per segment id; an empty segment yields zeros."""
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    sums = np.zeros((n_segments,) + x.value.shape[1:])
    np.add.at(sums, segments, x.value)
    inv = 1.0 / np.maximum(counts, 1.0)
    out = sums * inv.reshape((-1,) + (1,) * (sums.ndim - 1))

    def back(g):
        w = inv[segments].reshape((-1,) + (1,) * (g.ndim - 1))
        return (g[segments] * w,)

    return x.tape.record("segment_mean", out, (x,), back)


def dropout(x, rate):
    """Inverted dropout; identity when the tape is not in training mode or rate is 0."""
    if not x.tape.training or rate <= 0.0:
        return x
    keep = (x.tape.rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return x.tape.record("dropout", x.value * keep, (x,), lambda g: (g * keep,))


def ste_round(x):
    """Round half to even forward, identity gradient backward."""
    return x.tape.record("ste_round", np.round(x.value), (x,), lambda g: (g,))


def sparse_conv(x, w, b, kmap):
    """Kernel-map convolution on feature rows; also serves transposed convs."""
    out = sparse.apply_kernel_map(x.value, w.value, kmap)
    parents = (x, w)
    if b is not None:
        out = out + b.value
        parents = (x, w, b)

    def back(g):
        gx = sparse.kernel_map_input_grad(g, w.value, kmap) if x.requires_grad else None
        gw = sparse.kernel_map_weight_grad(x.value, g, kmap) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return x.tape.record("sparse_conv", out, parents, back)


def dense_grid_conv(x, w, b, kmap, coords_in, coords_out, spec, fine_stride, max_cells=64 ** 3):
    """Same contract as :func:`sparse_conv` but evaluated on a densified grid.

    Forward runs :func:`sparse.dense_conv_oracle` over the bounding box and
    reads the result back at the output coordinates. Backward reuses the
    kernel-map gradients, which are identical for the masked dense operator.
    """
    step = fine_stride * spec.stride
    both = np.concatenate([coords_in, coords_out]) if len(coords_out) else coords_in
    lo = (both.min(axis=0) // step) * step
    extent = (both.max(axis=0) - lo) // fine_stride + 1
    extent = -(-extent // spec.stride) * spec.stride
    if np.prod(extent) > max_cells:
        raise ValueError(f"dense convolution path is limited to {max_cells} cells, need {np.prod(extent)}")
    if spec.transposed:
        t_in = sparse.SparseTensor(coords_in, x.value, step, canonical=True)
        grid = t_in.dense(tuple(int(v) for v in extent // spec.stride), origin=lo)
        idx = (coords_out - lo) // fine_stride
    else:
        t_in = sparse.SparseTensor(coords_in, x.value, fine_stride, canonical=True)
        grid = t_in.dense(tuple(int(v) for v in extent), origin=lo)
        idx = (coords_out - lo) // step
    out_grid = sparse.dense_conv_oracle(grid, w.value, None, spec)
    out = out_grid[idx[:, 0], idx[:, 1], idx[:, 2]]
    parents = (x, w)
    if b is not None:
        out = out + b.value
        parents = (x, w, b)

    def back(g):
        gx = sparse.kernel_map_input_grad(g, w.value, kmap) if x.requires_grad else None
        gw = sparse.kernel_map_weight_grad(x.value, g, kmap) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return x.tape.record("dense_conv", out, parents, back)


# ------------------------------------------------------------------ losses


def bce(p, y, eps=1e-7):
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels ``y``."""
    y = np.asarray(y, dtype=np.float64)
    pv = p.value
    inside = (pv >= eps) & (pv <= 1.0 - eps)
    pc = np.clip(pv, eps, 1.0 - eps)
    n = max(pv.size, 1)
    val = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)) / n

    def back(g):
        return (g * inside * (-y / pc + (1.0 - y) / (1.0 - pc)) / n,)

    return p.tape.record("bce", val, (p,), back)


def focal_terms(z, occupied, sigma_occupied, sigma_empty, xi):
    """Per-element balanced focal loss on occupancy logits ``z``.

    ``p_t`` is the predicted probability of the true class and the weight is
    ``sigma_occupied`` or ``sigma_empty`` by true class.
    """
    occ = np.asarray(occupied, dtype=bool)
    sign = np.where(occ, 1.0, -1.0)
    zt = sign * z.value
    weight = np.where(occ, sigma_occupied, sigma_empty)
    log_pt = -np.logaddexp(0.0, -zt)
    pt = np.exp(log_pt)
    q = _sigmoid(-zt)
    qx = q ** xi if xi else np.ones_like(q)
    val = -weight * qx * log_pt

    def back(g):
        dzt = weight * qx * (xi * pt * log_pt - q)
        return (g * dzt * sign,)

    return z.tape.record("focal", val, (z,), back)


def laplace_bits(x, scale_node, channel_of_col=None, min_scale=1e-6, min_prob=1e-12):
    """Bits ``-log2 P(x)`` per element under a zero-mean Laplace with unit bins.

    ``x`` is (N, C); ``scale_node`` holds the C per-channel scales.
    """
    xv = x.value
    b = np.maximum(scale_node.value, min_scale)
    clipped = scale_node.value < min_scale
    prob, dp_dx, dp_db = _laplace_bin(xv, b)
    small = prob < min_prob
    prob = np.maximum(prob, min_prob)
    bits = -np.log2(prob)

    def back(g):
        coef = -g / (prob * math.log(2.0))
        coef = np.where(small, 0.0, coef)
        gx = coef * dp_dx
        gb = (coef * dp_db).sum(axis=0)
        gb = np.where(clipped, 0.0, gb)
        return gx, gb

    return x.tape.record("laplace_bits", bits, (x, scale_node), back)


def _laplace_bin(x, b):
    """P(X in [x-1/2, x+1/2]) for Laplace(0, b) and its partials."""
    a = np.abs(x)
    s = np.sign(x)
    outer = a >= 0.5
    # |x| >= 1/2: P = (e^{-(a-1/2)/b} - e^{-(a+1/2)/b}) / 2
    ao = np.maximum(a, 0.5)  # outer branch only matters there
    e1 = np.exp(-(ao - 0.5) / b)
    e2 = np.exp(-(ao + 0.5) / b)
    p_out = 0.5 * (e1 - e2)
    dpa_out = 0.5 * (-e1 + e2) / b
    dpb_out = 0.5 * (e1 * (ao - 0.5) - e2 * (ao + 0.5)) / (b * b)
    # |x| < 1/2: P = 1 - e^{-(1/2+x)/b}/2 - e^{-(1/2-x)/b}/2
    xi = np.clip(x, -0.5, 0.5)  # inner branch only matters there
    f1 = np.exp(-(0.5 + xi) / b)
    f2 = np.exp(-(0.5 - xi) / b)
    p_in = 1.0 - 0.5 * f1 - 0.5 * f2
    dpx_in = 0.5 * f1 / b - 0.5 * f2 / b
    dpb_in = -0.5 * f1 * (0.5 + xi) / (b * b) - 0.5 * f2 * (0.5 - xi) / (b * b)
    prob = np.where(outer, p_out, p_in)
    dp_dx = np.where(outer, dpa_out * s, dpx_in)
    dp_db = np.where(outer, dpb_out, dpb_in)
    return prob, dp_dx, dp_db


def laplace_bin_probability(x, b):
    return _laplace_bin(np.asarray(x, dtype=np.float64), np.asarray(b, dtype=np.float64))[0]


def mse(a, b):
    return mean_all(square(sub(a, b)))


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, state, params=None):
    """One Adam update over ``params`` (default: the whole store); grads are zeroed."""
    params = list(store) if params is None else list(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        m = state.m.get(p.id)
        if m is None:
            m = state.m[p.id] = np.zeros(p.shape)
            state.v[p.id] = np.zeros(p.shape)
        v = state.v[p.id]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value[...] = (p.value.astype(np.float64) - update).astype(p.value.dtype)
        p.grad[...] = 0.0


# --------------------------------------------------------------- checkpoints

MAGIC = b"PCGN"
VERSION = 1


def save_checkpoint(store, path):
    """Write ``store`` as: magic, u16 version, u32 count, then per parameter
    u16 id length, UTF-8 id, u8 rank, u32 dims, little-endian f32 payload."""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(store))]
    for p in store:
        raw = p.id.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, into=None):
    """Read a checkpoint. With ``into``, ids and shapes must match and values are copied."""
    with open(path, "rb") as fh:
        data = fh.read()
    store = _parse_checkpoint(data)
    if into is None:
        return store
    _check_compatible(into, store)
    into.load_values(store)
    return into


def _parse_checkpoint(data):
    if len(data) < 10 or data[:4] != MAGIC:
        raise VersionMismatch("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    pos = 10
    store = ParamStore()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise struct.error("truncated id")
            pid = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) * 4
            if pos + size > len(data):
                raise struct.error("truncated payload")
            value = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(dims)
            pos += size
            store.add(pid, value)
    except (struct.error, UnicodeDecodeError) as exc:
        raise VersionMismatch(f"corrupt or truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise VersionMismatch(f"{len(data) - pos} trailing bytes after last parameter")
    return store


def _check_compatible(target, source):
    for p in target:
        if p.id not in source:
            raise ShapeMismatch(f"parameter {p.id!r} missing from checkpoint")
        if source[p.id].shape != p.shape:
            raise ShapeMismatch(f"parameter {p.id!r}: checkpoint shape {source[p.id].shape}, "
                                f"model shape {p.shape}")
    for q in source:
        if q.id not in target:
            raise ShapeMismatch(f"checkpoint parameter {q.id!r} has no counterpart in the model")


# -------------------------------------------------------------------- init


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def gradient_check(fn, values, rng, n_samples=100, h=1e-4, rtol=1e-3, atol=1e-6):
    """Compare tape gradients with central differences.

    ``fn(tape, nodes)`` builds a scalar loss from leaf nodes created from
    ``values``. Returns a list of (leaf index, flat index, analytic, numeric)
    for every sampled entry that falls outside tolerance.
    """
    tape = Tape()
    nodes = [tape.variable(v) for v in values]
    loss = fn(tape, nodes)
    tape.backward(loss)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    def evaluate(vals):
        t = Tape()
        return float(fn(t, [t.variable(v) for v in vals]).value)

    sizes = np.array([np.asarray(v).size for v in values])
    total = sizes.sum()
    picks = rng.choice(total, size=n_samples, replace=total < n_samples)
    bounds = np.cumsum(sizes)
    failures = []
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        j = int(flat - (bounds[k - 1] if k else 0))
        plus = [np.array(v, dtype=np.float64) for v in values]
        minus = [np.array(v, dtype=np.float64) for v in values]
        plus[k].flat[j] += h
        minus[k].flat[j] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
        a = float(analytic[k].flat[j])
        if abs(a - numeric) > max(atol, rtol * max(abs(a), abs(numeric))):
            failures.append((k, j, a, numeric))
    return failures
