"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the handful of primitives needed by the recurrent encoder-decoder are
provided.  Every primitive records a closure that maps the gradient of its
output to gradients of its inputs; :func:`backward` walks the recorded graph
once in reverse topological order.

The optimizer stack (Adam with additive L2, global-norm clipping, inverted
dropout) and the checkpoint container live here as well.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def parameter(data):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


class _SliceGrad:
    """Gradient that is nonzero only on ``parent[idx]`` (basic indexing)."""

    __slots__ = ("idx", "value")

    def __init__(self, idx, value):
        self.idx, self.value = idx, value


def getitem(a, idx):
    shape = a.data.shape
    basic = all(isinstance(i, (int, slice, type(None))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        if basic:
            return (_SliceGrad(idx, g),)
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradient is scattered back with ``add.at``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.data.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


# --------------------------------------------------------------------------
# fused recurrent primitives


def gru_cell(xp, h, w_h, w_hc, mask=None):
    """GRU update from a precomputed input projection.

    ``xp`` is (B, 3H) holding the update/reset/candidate input terms.
    ``mask`` (B, 1) of 0/1 freezes the state of finished rows.
    """
    H = h.data.shape[1]
    xd, hd, wh, whc = xp.data, h.data, w_h.data, w_hc.data
    zr = _sigmoid_np(xd[:, : 2 * H] + hd @ wh)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * hd
    c = np.tanh(xd[:, 2 * H:] + rh @ whc)
    zm = z if mask is None else z * mask
    out = hd + zm * (c - hd)

    def bw(g):
        d_cpre = g * zm * (1.0 - c * c)
        d_z = g * (c - hd)
        if mask is not None:
            d_z = d_z * mask
        d_rh = d_cpre @ whc.T
        d_a = np.concatenate([d_z * z * (1.0 - z), d_rh * hd * r * (1.0 - r)], axis=1)
        d_h = g * (1.0 - zm) + d_rh * r + d_a @ wh.T
        return (np.concatenate([d_a, d_cpre], axis=1), d_h, hd.T @ d_a, rh.T @ d_cpre)

    return _make(out, (xp, h, w_h, w_hc), bw, "gru_cell")


def additive_attention(keys, query, v, bias, values):
    """Context vectors ``sum_s softmax_s(tanh(keys + query) @ v + bias) * values``.

    Shapes: keys (B, S, A), query (B, A), v (A, 1), bias (B, S) constant,
    values (B, S, D).  Returns (B, D).
    """
    kd, qd, vd, ed = keys.data, query.data, v.data, values.data
    e = np.tanh(kd + qd[:, None, :])
    scores = (e @ vd)[:, :, 0] + bias
    alpha = softmax_np(scores, axis=-1)
    out = np.einsum("bs,bsd->bd", alpha, ed)

    def bw(g):
        d_alpha = np.einsum("bd,bsd->bs", g, ed)
        d_values = alpha[:, :, None] * g[:, None, :]
        d_scores = alpha * (d_alpha - (d_alpha * alpha).sum(axis=-1, keepdims=True))
        d_pre = d_scores[:, :, None] * vd[:, 0] * (1.0 - e * e)
        d_v = np.einsum("bsa,bs->a", e, d_scores)[:, None]
        return d_pre, d_pre.sum(axis=1), d_v, d_values

    return _make(out, (keys, query, v, values), bw, "attention")


# --------------------------------------------------------------------------
# probability


def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    a = as_tensor(a)
    out = softmax_np(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    out = log_softmax_np(a.data, axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def pick(a, ids):
    """Select ``a[i, ids[i]]`` for a 2-D ``a``."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(len(ids))
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[rows, ids] = g
        return (out,)

    return _make(a.data[rows, ids], (a,), bw, "pick")


def dropout(a, p, rng, train=True):
    """Inverted dropout: identity at eval time, unbiased at train time."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, mask)


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # keys whose buffers the engine allocated and may mutate
    for node in reversed(order):
        k = id(node)
        g = grads.pop(k, None)
        owned.discard(k)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if isinstance(pg, _SliceGrad):
                if k not in owned:
                    buf = np.zeros(p.data.shape, dtype=DTYPE) if k not in grads else grads[k].copy()
                    grads[k] = buf
                    owned.add(k)
                grads[k][pg.idx] += pg.value
            elif k in grads:
                grads[k] = grads[k] + pg
                owned.add(k)
            else:
                grads[k] = pg


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainHyper:
    """Training hyperparameters; defaults are the published values."""

    batch_size: int = 60
    dropout_prob: float = 0.2
    l2_weight: float = 1e-8
    clip_norm: float = 1.0
    max_epochs: int = 10
    max_len: int = 60
    lr: float = 1e-4
    patience: int = 3

    def __post_init__(self):
        for name in ("batch_size", "dropout_prob", "l2_weight", "clip_norm", "max_epochs", "max_len", "lr",
                     "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.dropout_prob >= 1.0:
            raise ValueError("dropout_prob must be < 1")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def global_norm(grads):
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def clip_global_norm(grads, clip_norm):
    """Rescale a list of gradient arrays so their joint L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return list(grads)
    scale = clip_norm / norm
    return [g * scale for g in grads]


def adam_step(params, grads, state, l2_weight=0.0):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are dicts of arrays keyed by parameter name.
    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    state = state.copy()
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if l2_weight:
            g = g + l2_weight * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


# --------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"WSNMTCK\x00"
_VERSION = 1


def _write_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())


def _read_tensors(buf):
    (n,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<I", buf.read(4))
        name = buf.read(ln).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).astype(DTYPE)
    return out


def checkpoint_bytes(tensors, header=None, optimizer=None):
    """Serialize named tensors (+ optional header dict and Adam state) to bytes."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    meta = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", _VERSION, len(meta)))
    buf.write(meta)
    _write_tensors(buf, tensors)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q4d", optimizer.t, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps))
        _write_tensors(buf, optimizer.m)
        _write_tensors(buf, optimizer.v)
    return buf.getvalue()


def parse_checkpoint(data):
    buf = io.BytesIO(data)
    if buf.read(len(_MAGIC)) != _MAGIC:
        raise ValueError("not a checkpoint file")
    version, ln = struct.unpack("<II", buf.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(ln).decode("utf-8"))
    tensors = _read_tensors(buf)
    optimizer = None
    if buf.read(1) == b"\x01":
        t, lr, b1, b2, eps = struct.unpack("<Q4d", buf.read(40))
        m = _read_tensors(buf)
        v = _read_tensors(buf)
        optimizer = AdamState(lr, b1, b2, eps, t, m, v)
    return tensors, header, optimizer


def save_checkpoint(path, tensors, header=None, optimizer=None):
    data = checkpoint_bytes(tensors, header, optimizer)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
