"""Static compute graphs with reverse-mode differentiation.

A :class:`Graph` is built once for fixed shapes: every builder method appends a
node and returns its integer id, so node ids are already in topological order.
Trainable tensors live in a :class:`ParamStore` that several graphs may share
(a training graph and an inference graph built for another batch size, say).

Gradient isolation comes in two flavours. :meth:`Graph.stop_gradient` inserts
an identity node whose backward contribution is zero, and
:meth:`Graph.backward` accepts ``stop_at`` node ids that act as stop markers
for a single backward call. The second form lets several local losses share
one forward pass while cutting their backward passes at different places.
"""
from __future__ import annotations

import contextlib
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "ParamStore",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "eval_forward",
    "backward",
    "stop_gradient",
    "finite_diff_grad",
    "bilinear_matrix",
]


class ShapeError(ValueError):
    """Raised when tensor shapes do not chain."""


class GraphError(RuntimeError):
    """Misuse of a graph: unbound inputs, unknown nodes, backward before forward."""


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


# --------------------------------------------------------------------------
# parameter storage


@dataclass
class _ParamInit:
    shape: tuple
    kind: str
    fan_in: int
    key: str


class ParamStore:
    """Named trainable tensors and non-trainable buffers.

    Parameters are materialized lazily from a seeded centered-uniform
    initializer: ``U(-b, b)`` with ``b = sqrt(6 / fan_in)``. The stream for a
    tensor is derived from ``(seed, crc32(key))`` so initial values do not
    depend on declaration order; replicas declared with the same ``key`` start
    out identical.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self._inits: dict[str, _ParamInit] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def declare(self, name, shape, kind="uniform", fan_in=None, key=None):
        shape = tuple(int(s) for s in shape)
        if name in self._inits:
            if self._inits[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} redeclared with shape {shape}, "
                    f"was {self._inits[name].shape}")
            return
        if kind not in ("uniform", "bias", "zeros", "ones"):
            raise ValueError(f"unknown initializer {kind!r}")
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        self._inits[name] = _ParamInit(shape, kind, max(int(fan_in), 1), key or name)

    def declare_buffer(self, name, value):
        if name not in self.buffers:
            self.buffers[name] = np.array(value, dtype=self.dtype)

    def _materialize(self, name):
        spec = self._inits[name]
        if spec.kind == "zeros":
            value = np.zeros(spec.shape)
        elif spec.kind == "ones":
            value = np.ones(spec.shape)
        else:
            rng = np.random.default_rng([self.seed, zlib.crc32(spec.key.encode())])
            # "bias" uses the narrower 1/sqrt(fan_in) bound common for linear biases
            bound = np.sqrt((1.0 if spec.kind == "bias" else 6.0) / spec.fan_in)
            value = rng.uniform(-bound, bound, size=spec.shape)
        value = value.astype(self.dtype)
        self._values[name] = value
        return value

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            if name not in self._inits:
                raise KeyError(name) from None
            return self._materialize(name)

    def __setitem__(self, name, value):
        if name not in self._inits:
            raise KeyError(name)
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self._inits[name].shape:
            raise ShapeError(f"{name}: expected {self._inits[name].shape}, got {value.shape}")
        self._values[name] = value

    def __contains__(self, name):
        return name in self._inits

    def __iter__(self):
        return iter(sorted(self._inits))

    def __len__(self):
        return len(self._inits)

    def names(self):
        return sorted(self._inits)

    def shape(self, name):
        return self._inits[name].shape

    def n_elements(self, names=None):
        names = self._inits if names is None else names
        return int(sum(np.prod(self._inits[n].shape) for n in names))

    def state_dict(self):
        """Parameters plus ``buffer:``-prefixed buffers, in sorted name order."""
        out = {n: self[n] for n in self.names()}
        for n in sorted(self.buffers):
            out["buffer:" + n] = self.buffers[n]
        return out

    def load_state_dict(self, state):
        for name, value in state.items():
            if name.startswith("buffer:"):
                self.buffers[name[len("buffer:"):]] = np.array(value, dtype=self.dtype)
            else:
                self[name] = value


# --------------------------------------------------------------------------
# primitive kernels


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _im2col(x, kh, kw, stride, padding):
    sh, sw = stride
    ph, pw = padding
    x = x.transpose(0, 2, 3, 1)
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 3)


def _wmat(w):
    # (O, Cg, kh, kw) -> (O, kh * kw * Cg), matching the column order of _im2col
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv2d_forward(x, w, stride=(1, 1), padding=(0, 0), groups=1):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = _conv_out(h, kh, stride[0], padding[0])
    wo = _conv_out(wd, kw, stride[1], padding[1])
    win = _im2col(x, kh, kw, stride, padding)
    og = o // groups
    wm = _wmat(w)
    cols = []
    out = np.empty((n, ho, wo, o), dtype=np.result_type(x, w))
    for g in range(groups):
        col = win[..., g * cg:(g + 1) * cg].reshape(n * ho * wo, kh * kw * cg)
        out[..., g * og:(g + 1) * og] = (col @ wm[g * og:(g + 1) * og].T).reshape(n, ho, wo, og)
        cols.append(col)
    return out.transpose(0, 3, 1, 2), cols


def conv2d_backward(grad, x_shape, w, cols, stride, padding, groups):
    n, c, h, wd = x_shape
    o, cg, kh, kw = w.shape
    _, _, ho, wo = grad.shape
    og = o // groups
    sh, sw = stride
    ph, pw = padding
    g2 = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = np.empty_like(w)
    for g in range(groups):
        dwm = g2[:, g * og:(g + 1) * og].T @ cols[g]
        dw[g * og:(g + 1) * og] = dwm.reshape(og, kh, kw, cg).transpose(0, 3, 1, 2)
    # column gradients laid out (N, C, kh, kw, Ho, Wo) so the scatter copies whole rows
    gg = np.ascontiguousarray(grad).reshape(n, groups, og, ho * wo)
    wm = w.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)
    dcol = np.matmul(wm[None], gg).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcol[:, :, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd]), dw


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out, n_in) under half-pixel centers."""
    r = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(r, 1.0)
        return r
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        r[o, i0] += 1.0 - frac
        r[o, i1] += frac
    return r


def _logsumexp_rows(s):
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]


# --------------------------------------------------------------------------
# op table: each entry is (shape_fn, forward_fn, backward_fn)
#   shape_fn(in_shapes, attrs) -> out shape
#   forward_fn(xs, attrs, ctx) -> (value, cache)
#   backward_fn(g, xs, y, cache, attrs) -> list of input grads (None = no grad)

_OPS: dict[str, tuple] = {}


def _op(name):
    def register(cls):
        _OPS[name] = (cls.shape, cls.forward, cls.backward)
        return cls
    return register


def _broadcast_shape(a, b):
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"cannot broadcast {a} with {b}") from None


@_op("add")
class _Add:
    shape = staticmethod(lambda s, a: _broadcast_shape(s[0], s[1]))
    forward = staticmethod(lambda xs, a, ctx: (xs[0] + xs[1], None))

    @staticmethod
    def backward(g, xs, y, cache, a):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@_op("sub")
class _Sub:
    shape = staticmethod(lambda s, a: _broadcast_shape(s[0], s[1]))
    forward = staticmethod(lambda xs, a, ctx: (xs[0] - xs[1], None))

    @staticmethod
    def backward(g, xs, y, cache, a):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


@_op("mul")
class _Mul:
    shape = staticmethod(lambda s, a: _broadcast_shape(s[0], s[1]))
    forward = staticmethod(lambda xs, a, ctx: (xs[0] * xs[1], None))

    @staticmethod
    def backward(g, xs, y, cache, a):
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]


@_op("scale")
class _Scale:
    shape = staticmethod(lambda s, a: s[0])
    forward = staticmethod(lambda xs, a, ctx: (xs[0] * a["c"], None))
    backward = staticmethod(lambda g, xs, y, cache, a: [g * a["c"]])


@_op("sum")
class _Sum:
    shape = staticmethod(lambda s, a: ())
    forward = staticmethod(lambda xs, a, ctx: (np.asarray(xs[0].sum(), dtype=xs[0].dtype), None))
    backward = staticmethod(lambda g, xs, y, cache, a: [np.broadcast_to(g, xs[0].shape).copy()])


@_op("mean")
class _Mean:
    shape = staticmethod(lambda s, a: ())
    forward = staticmethod(lambda xs, a, ctx: (np.asarray(xs[0].mean(), dtype=xs[0].dtype), None))

    @staticmethod
    def backward(g, xs, y, cache, a):
        return [np.full(xs[0].shape, g / xs[0].size, dtype=xs[0].dtype)]


@_op("relu")
class _Relu:
    shape = staticmethod(lambda s, a: s[0])
    forward = staticmethod(lambda xs, a, ctx: (np.maximum(xs[0], 0), None))
    # subgradient at exactly 0 is 0
    backward = staticmethod(lambda g, xs, y, cache, a: [g * (xs[0] > 0)])


@_op("identity")
class _Identity:
    shape = staticmethod(lambda s, a: s[0])
    forward = staticmethod(lambda xs, a, ctx: (xs[0], None))
    backward = staticmethod(lambda g, xs, y, cache, a: [g])


@_op("stop_gradient")
class _Stop:
    shape = staticmethod(lambda s, a: s[0])
    forward = staticmethod(lambda xs, a, ctx: (xs[0], None))
    backward = staticmethod(lambda g, xs, y, cache, a: [None])


@_op("reshape")
class _Reshape:
    @staticmethod
    def shape(s, a):
        if int(np.prod(s[0])) != int(np.prod(a["shape"])):
            raise ShapeError(f"cannot reshape {s[0]} to {a['shape']}")
        return tuple(a["shape"])

    forward = staticmethod(lambda xs, a, ctx: (xs[0].reshape(a["shape"]), None))
    backward = staticmethod(lambda g, xs, y, cache, a: [g.reshape(xs[0].shape)])


@_op("matmul")
class _Matmul:
    @staticmethod
    def shape(s, a):
        if len(s[0]) != 2 or len(s[1]) != 2 or s[0][1] != s[1][0]:
            raise ShapeError(f"matmul shapes {s[0]} @ {s[1]}")
        return (s[0][0], s[1][1])

    forward = staticmethod(lambda xs, a, ctx: (xs[0] @ xs[1], None))
    backward = staticmethod(lambda g, xs, y, cache, a: [g @ xs[1].T, xs[0].T @ g])


@_op("linear")
class _Linear:
    """x (N, in) @ W.T (in, out) [+ b (out)]."""

    @staticmethod
    def shape(s, a):
        x, w = s[0], s[1]
        if len(x) != 2 or len(w) != 2 or x[1] != w[1] or (len(s) > 2 and s[2] != (w[0],)):
            raise ShapeError(f"linear shapes {s}")
        return (x[0], w[0])

    @staticmethod
    def forward(xs, a, ctx):
        y = xs[0] @ xs[1].T
        return (y + xs[2] if len(xs) > 2 else y), None

    @staticmethod
    def backward(g, xs, y, cache, a):
        out = [g @ xs[1], g.T @ xs[0]]
        return out + [g.sum(axis=0)] if len(xs) > 2 else out


@_op("conv2d")
class _Conv2d:
    @staticmethod
    def shape(s, a):
        x, w = s
        groups = a["groups"]
        if len(x) != 4 or len(w) != 4:
            raise ShapeError(f"conv2d expects NCHW input and OIHW weights, got {x}, {w}")
        if x[1] % groups or w[0] % groups:
            raise ShapeError(f"channels {x[1]}->{w[0]} not divisible by groups={groups}")
        if w[1] != x[1] // groups:
            raise ShapeError(f"weight {w} does not match {x[1]} input channels / {groups} groups")
        ho = _conv_out(x[2], w[2], a["stride"][0], a["padding"][0])
        wo = _conv_out(x[3], w[3], a["stride"][1], a["padding"][1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {x} kernel {w[2:]}")
        return (x[0], w[0], ho, wo)

    @staticmethod
    def forward(xs, a, ctx):
        return conv2d_forward(xs[0], xs[1], a["stride"], a["padding"], a["groups"])

    @staticmethod
    def backward(g, xs, y, cache, a):
        dx, dw = conv2d_backward(g, xs[0].shape, xs[1], cache, a["stride"], a["padding"], a["groups"])
        return [dx, dw]


@_op("batch_norm")
class _BatchNorm:
    @staticmethod
    def shape(s, a):
        x, gamma, beta = s
        if len(x) not in (2, 4) or gamma != (x[1],) or beta != (x[1],):
            raise ShapeError(f"batch_norm shapes x{x} gamma{gamma} beta{beta}")
        return x

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bshape(x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    @classmethod
    def forward(cls, xs, a, ctx):
        x, gamma, beta = xs
        axes, bs = cls._axes(x), cls._bshape(x)
        eps = a["eps"]
        store = ctx["store"]
        rm = store.buffers[a["buffer"] + ".mean"]
        rv = store.buffers[a["buffer"] + ".var"]
        if ctx["training"]:
            count = x.size // x.shape[1]
            if count == 1:
                warnings.warn("batch_norm on a single element per channel: zero variance",
                              RuntimeWarning, stacklevel=2)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
            if ctx["update_stats"]:
                m = a["momentum"]
                unbiased = var * count / max(count - 1, 1)
                rm *= 1 - m
                rm += m * mean
                rv *= 1 - m
                rv += m * unbiased
            cache = ("train", xhat, inv, count)
        else:
            inv = 1.0 / np.sqrt(rv + eps)
            xhat = (x - rm.reshape(bs)) * inv.reshape(bs)
            cache = ("eval", xhat, inv, None)
        y = xhat * gamma.reshape(bs) + beta.reshape(bs)
        return y.astype(x.dtype, copy=False), cache

    @classmethod
    def backward(cls, g, xs, y, cache, a):
        x, gamma, _ = xs
        axes, bs = cls._axes(x), cls._bshape(x)
        mode, xhat, inv, count = cache
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.reshape(bs)
        if mode == "eval":
            dx = dxhat * inv.reshape(bs)
        else:
            dx = (inv.reshape(bs) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bs)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs))
        return [dx, dgamma, dbeta]


@_op("max_pool2d")
class _MaxPool:
    @staticmethod
    def shape(s, a):
        x = s[0]
        k, st, p = a["kernel"], a["stride"], a["padding"]
        return (x[0], x[1], _conv_out(x[2], k, st, p), _conv_out(x[3], k, st, p))

    @staticmethod
    def forward(xs, a, ctx):
        x = xs[0]
        k, s, p = a["kernel"], a["stride"], a["padding"]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, idx

    @staticmethod
    def backward(g, xs, y, idx, a):
        x = xs[0]
        k, s, p = a["kernel"], a["stride"], a["padding"]
        n, c, h, w = x.shape
        ho, wo = g.shape[2:]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * (idx == i * k + j)
        return [dxp[:, :, p:p + h, p:p + w]]


@_op("bilinear_resize")
class _Resize:
    @staticmethod
    def shape(s, a):
        x = s[0]
        oh, ow = a["size"]
        if len(x) != 4 or oh < 1 or ow < 1:
            raise ShapeError(f"bilinear_resize of {x} to {a['size']}")
        return (x[0], x[1], oh, ow)

    @staticmethod
    def forward(xs, a, ctx):
        x = xs[0]
        h, w = x.shape[2:]
        oh, ow = a["size"]
        if (h, w) == (oh, ow):
            return x.copy(), None
        rh = bilinear_matrix(h, oh).astype(x.dtype)
        rw = bilinear_matrix(w, ow).astype(x.dtype)
        return (rh @ x) @ rw.T, (rh, rw)

    @staticmethod
    def backward(g, xs, y, cache, a):
        if cache is None:
            return [g]
        rh, rw = cache
        return [(rh.T @ g) @ rw]


@_op("global_avg_pool")
class _GAP:
    @staticmethod
    def shape(s, a):
        if len(s[0]) != 4:
            raise ShapeError(f"global_avg_pool expects NCHW, got {s[0]}")
        return s[0][:2]

    forward = staticmethod(lambda xs, a, ctx: (xs[0].mean(axis=(2, 3)), None))

    @staticmethod
    def backward(g, xs, y, cache, a):
        n, c, h, w = xs[0].shape
        return [np.broadcast_to((g / (h * w))[:, :, None, None], xs[0].shape).copy()]


@_op("l2_normalize")
class _L2Norm:
    @staticmethod
    def shape(s, a):
        if len(s[0]) != 2:
            raise ShapeError(f"l2_normalize expects (N, D), got {s[0]}")
        return s[0]

    @staticmethod
    def forward(xs, a, ctx):
        x = xs[0]
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        if np.any(norm == 0):
            raise FloatingPointError("cannot normalize a zero vector (degenerate projection)")
        y = x / norm
        return y, norm

    @staticmethod
    def backward(g, xs, y, norm, a):
        return [(g - y * (g * y).sum(axis=1, keepdims=True)) / norm]


@_op("info_nce")
class _InfoNCE:
    """SimCLR batch InfoNCE over 2N unit vectors; rows 2k and 2k+1 are positives."""

    @staticmethod
    def shape(s, a):
        z = s[0]
        if len(z) != 2 or z[0] % 2 or z[0] < 4:
            raise ShapeError(f"info_nce expects (2N, D) with N >= 2, got {z}")
        return ()

    @staticmethod
    def forward(xs, a, ctx):
        z = xs[0]
        tau = a["tau"]
        tol = a["norm_tol"]
        if tol is not None:
            norms = np.sqrt((z * z).sum(axis=1))
            if np.any(np.abs(norms - 1) > tol):
                raise ValueError("info_nce inputs must be unit-norm vectors")
        m = z.shape[0]
        s = (z @ z.T) / tau
        np.fill_diagonal(s, -np.inf)
        pos = np.arange(m) ^ 1
        lse = _logsumexp_rows(s)
        loss = (lse - s[np.arange(m), pos]).mean()
        return np.asarray(loss, dtype=z.dtype), (s, lse, pos)

    @staticmethod
    def backward(g, xs, y, cache, a):
        z = xs[0]
        s, lse, pos = cache
        m = z.shape[0]
        p = np.exp(s - lse[:, None])
        p[np.arange(m), pos] -= 1.0
        ds = p * (g / m)
        return [((ds + ds.T) @ z) / a["tau"]]


# --------------------------------------------------------------------------
# graph


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    shape: tuple
    scope: str = ""
    name: str | None = None


@dataclass
class Graph:
    """A fixed-shape computation graph.

    Leaves are created with :meth:`input`, :meth:`param` and :meth:`constant`;
    every other builder method records a primitive and returns the new node id.
    Nodes created inside a :meth:`scoped` block are tagged with that scope,
    which is how stage membership is tracked for accounting and route reports.
    """

    store: ParamStore = field(default_factory=ParamStore)
    debug: bool = False
    nodes: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    names: dict = field(default_factory=dict)
    stops: set = field(default_factory=set)

    def __post_init__(self):
        self._scope: list[str] = []
        self._constants: dict[int, np.ndarray] = {}
        self.values: list | None = None
        self._caches: list | None = None
        self._bindings: dict | None = None
        self._training = True
        self._reach_cache: dict = {}

    @property
    def dtype(self):
        return self.store.dtype

    # -- construction ----------------------------------------------------

    @contextlib.contextmanager
    def scoped(self, scope: str):
        self._scope.append(scope)
        try:
            yield
        finally:
            self._scope.pop()

    @property
    def scope(self):
        return "/".join(self._scope)

    def _add(self, op, inputs, attrs=None, shape=None, name=None):
        attrs = attrs or {}
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"unknown node {i}")
        if shape is None:
            shape_fn = _OPS[op][0]
            shape = tuple(shape_fn([self.nodes[i].shape for i in inputs], attrs))
        self.nodes.append(Node(op, tuple(inputs), attrs, tuple(shape), self.scope, name))
        self._reach_cache.clear()
        nid = len(self.nodes) - 1
        if name is not None:
            self.names[name] = nid
        return nid

    def input(self, name: str, shape) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        nid = self._add("input", (), {"name": name}, shape=tuple(shape), name=name)
        self.inputs[name] = nid
        return nid

    def param(self, name: str, shape, kind="uniform", fan_in=None, key=None) -> int:
        if name in self.params:
            return self.params[name]
        self.store.declare(name, shape, kind, fan_in, key)
        nid = self._add("param", (), {"name": name}, shape=tuple(shape))
        self.params[name] = nid
        return nid

    def constant(self, value) -> int:
        value = np.asarray(value, dtype=self.dtype)
        nid = self._add("constant", (), {}, shape=value.shape)
        self._constants[nid] = value
        return nid

    def mark(self, name: str, node: int) -> int:
        self.names[name] = node
        return node

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def scale(self, a, c: float):
        return self._add("scale", (a,), {"c": float(c)})

    def sum(self, a):
        return self._add("sum", (a,))

    def mean(self, a):
        return self._add("mean", (a,))

    def relu(self, a):
        return self._add("relu", (a,))

    def identity(self, a):
        return self._add("identity", (a,))

    def reshape(self, a, shape):
        return self._add("reshape", (a,), {"shape": tuple(shape)})

    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def linear(self, x, w, b=None):
        return self._add("linear", (x, w) if b is None else (x, w, b))

    def conv2d(self, x, w, stride=(1, 1), padding=(0, 0), groups=1):
        attrs = {"stride": tuple(stride), "padding": tuple(padding), "groups": int(groups)}
        return self._add("conv2d", (x, w), attrs)

    def batch_norm(self, x, gamma, beta, buffer: str, eps=1e-5, momentum=0.1):
        c = self.nodes[x].shape[1]
        self.store.declare_buffer(buffer + ".mean", np.zeros(c))
        self.store.declare_buffer(buffer + ".var", np.ones(c))
        return self._add("batch_norm", (x, gamma, beta),
                         {"buffer": buffer, "eps": float(eps), "momentum": float(momentum)})

    def max_pool2d(self, x, kernel=3, stride=2, padding=1):
        return self._add("max_pool2d", (x,), {"kernel": kernel, "stride": stride, "padding": padding})

    def bilinear_resize(self, x, size):
        return self._add("bilinear_resize", (x,), {"size": (int(size[0]), int(size[1]))})

    def global_avg_pool(self, x):
        return self._add("global_avg_pool", (x,))

    def l2_normalize(self, x):
        return self._add("l2_normalize", (x,))

    def info_nce(self, z, tau=0.1, norm_tol=1e-5):
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        return self._add("info_nce", (z,), {"tau": float(tau), "norm_tol": norm_tol})

    def stop_gradient(self, x):
        if not 0 <= x < len(self.nodes):
            raise GraphError(f"unknown node {x}")
        nid = self._add("stop_gradient", (x,))
        self.stops.add(nid)
        return nid

    def shape(self, node) -> tuple:
        return self.nodes[node].shape

    # -- evaluation ------------------------------------------------------

    def forward(self, bindings: dict | None = None, training=True, update_stats=True):
        """Evaluate every node; returns the list of node values."""
        bindings = dict(bindings or {})
        for name, nid in self.inputs.items():
            if name not in bindings:
                raise GraphError(f"unbound input {name!r}")
            shape = np.shape(bindings[name])
            if tuple(shape) != self.nodes[nid].shape:
                raise ShapeError(f"input {name!r}: expected {self.nodes[nid].shape}, got {shape}")
        ctx = {"store": self.store, "training": training, "update_stats": update_stats}
        values, caches = [], []
        for nid, node in enumerate(self.nodes):
            cache = None
            if node.op == "input":
                val = np.asarray(bindings[node.attrs["name"]], dtype=self.dtype)
            elif node.op == "param":
                val = self.store[node.attrs["name"]]
            elif node.op == "constant":
                val = self._constants[nid]
            else:
                val, cache = _OPS[node.op][1]([values[i] for i in node.inputs], node.attrs, ctx)
                if self.debug:
                    if val.shape != node.shape:
                        raise ShapeError(f"node {nid} ({node.op}) produced {val.shape}, "
                                         f"declared {node.shape}")
                    if not np.all(np.isfinite(val)):
                        raise NonFiniteError(nid, node.op)
            values.append(val)
            caches.append(cache)
        self.values, self._caches = values, caches
        self._bindings, self._training = bindings, training
        return values

    def branch_signature(self):
        """Relu sign patterns and max-pool winners of the last forward pass,
        the points where the graph is not differentiable."""
        sig = []
        for nid, node in enumerate(self.nodes):
            if node.op == "relu":
                sig.append(self.values[node.inputs[0]] > 0)
            elif node.op == "max_pool2d":
                sig.append(self._caches[nid])
        return sig

    def value(self, node) -> np.ndarray:
        if self.values is None:
            raise GraphError("graph has not been evaluated")
        return self.values[node]

    def _reachable(self, loss, stop_at):
        key = (loss, stop_at)
        hit = self._reach_cache.get(key)
        if hit is not None:
            return hit
        live = np.zeros(len(self.nodes), dtype=bool)
        live[loss] = True
        for nid in range(loss, -1, -1):
            if not live[nid] or nid in stop_at or nid in self.stops:
                continue
            for i in self.nodes[nid].inputs:
                live[i] = True
        order = [n for n in range(loss, -1, -1) if live[n]]
        self._reach_cache[key] = order
        return order

    def backward(self, loss: int, stop_at: Iterable[int] = (), seed: float = 1.0):
        """Gradients of a scalar node with respect to every parameter.

        Returns ``(param_grads, visited)``: a dict over all parameters of this
        graph (zeros where unreachable) and the set of node ids whose backward
        rule ran.
        """
        if self.values is None:
            raise GraphError("backward called before forward")
        if self.nodes[loss].shape != ():
            raise ShapeError(f"loss node {loss} is not scalar: {self.nodes[loss].shape}")
        stop_at = frozenset(stop_at)
        grads: dict[int, np.ndarray] = {loss: np.asarray(seed, dtype=self.dtype)}
        visited = set()
        for nid in self._reachable(loss, stop_at):
            node = self.nodes[nid]
            if node.op in ("param", "input", "constant"):
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            if nid in stop_at or nid in self.stops:
                continue
            visited.add(nid)
            xs = [self.values[i] for i in node.inputs]
            in_grads = _OPS[node.op][2](g, xs, self.values[nid], self._caches[nid], node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for name, nid in self.params.items():
            g = grads.get(nid)
            out[name] = np.zeros(self.nodes[nid].shape, dtype=self.dtype) if g is None \
                else np.asarray(g, dtype=self.dtype)
        input_grads = {name: grads[nid] for name, nid in self.inputs.items() if nid in grads}
        self.input_grads = input_grads
        return out, visited


# --------------------------------------------------------------------------
# functional surface


def eval_forward(graph: Graph, bindings: dict, training=True) -> dict:
    """Evaluate ``graph`` and return the values of all named nodes."""
    values = graph.forward(bindings, training=training)
    return {name: values[nid] for name, nid in graph.names.items()}


def backward(graph: Graph, loss_node: int, stop_at: Iterable[int] = ()) -> dict:
    grads, _ = graph.backward(loss_node, stop_at)
    return grads


def stop_gradient(graph: Graph, node: int) -> int:
    return graph.stop_gradient(node)


def finite_diff_grad(graph: Graph, loss_node: int, name: str, index, eps: float = 1e-5) -> float:
    """Central difference of the loss with respect to one parameter element.

    Re-evaluates the graph with the bindings and mode of its last forward pass;
    batch-norm running statistics are left untouched.
    """
    return _central_difference(graph, loss_node, name, index, eps)[0]


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(graph, loss_node, name, index, eps, check_kinks=False):
    """Returns ``(estimate, crossed)``; ``crossed`` flags a relu or max-pool
    decision that differs between the two probes and the base point."""
    if graph._bindings is None:
        raise GraphError("finite_diff_grad needs a prior forward pass")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if name in graph.params:
        arr = graph.store[name]
    elif name in graph.inputs:
        arr = graph._bindings[name] = np.array(graph._bindings[name], dtype=graph.dtype)
    else:
        raise KeyError(name)
    index = np.unravel_index(index, arr.shape) if np.isscalar(index) else tuple(index)
    for axis, i in enumerate(index):
        if not -arr.shape[axis] <= i < arr.shape[axis]:
            raise IndexError(f"index {index} out of range for {name} with shape {arr.shape}")
    bindings, training = graph._bindings, graph._training
    base = graph.branch_signature() if check_kinks else None
    crossed = False
    saved = arr[index].copy()
    try:
        arr[index] = saved + eps
        up = float(graph.forward(bindings, training, update_stats=False)[loss_node])
        if check_kinks:
            crossed |= not _same(base, graph.branch_signature())
        arr[index] = saved - eps
        down = float(graph.forward(bindings, training, update_stats=False)[loss_node])
        if check_kinks:
            crossed |= not _same(base, graph.branch_signature())
    finally:
        arr[index] = saved
    graph.forward(bindings, training, update_stats=False)
    return (up - down) / (2 * eps), crossed


def max_relative_error(analytic, numeric, floor=1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(graph: Graph, loss_node: int, names: Sequence[str] | None = None,
              eps: float = 1e-5, max_elements: int = 6, seed: int = 0,
              stop_at: Iterable[int] = ()) -> dict[str, float]:
    """Compare :meth:`Graph.backward` against central differences.

    Checks up to ``max_elements`` randomly chosen elements per parameter and
    returns the max relative error per parameter name. Elements whose probes
    flip a relu sign or a max-pool winner are skipped, since the difference
    quotient straddles a kink there. Relative error uses
    ``max(|a|, |n|, 1e-8)`` as the denominator, so gradients that are both
    tiny are compared absolutely.
    """
    if graph.values is None:
        raise GraphError("gradcheck needs a prior forward pass")
    grads, _ = graph.backward(loss_node, stop_at)
    rng = np.random.default_rng(seed)
    names = list(graph.params) if names is None else list(names)
    out = {}
    for name in names:
        g = grads[name]
        analytic, numeric = [], []
        for i in rng.permutation(g.size):
            if len(analytic) == max_elements:
                break
            est, crossed = _central_difference(graph, loss_node, name, int(i), eps, check_kinks=True)
            if crossed:
                continue
            analytic.append(g.flat[i])
            numeric.append(est)
        out[name] = max_relative_error(analytic, numeric) if analytic else float("nan")
    return out
