"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Graph` is an append-only tape. Every primitive appends one node
holding its output value and a backward rule; :meth:`Graph.backward` walks
the tape once in reverse insertion order.

No implicit broadcasting: binary ops take equal shapes or a python scalar.
Use :func:`expand` when a broadcast is really meant.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("graph", "id", "value", "requires_grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, graph: "Graph", nid: int, value: np.ndarray,
                 requires_grad: bool, name: str | None = None):
        self.graph = graph
        self.id = nid
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = self.name or f"#{self.id}"
        return f"Tensor({tag}, shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(self, o)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return add(neg(self), o)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(self, o)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple[int, ...], backward: Backward | None):
        self.parents = parents
        self.backward = backward


class Graph:
    """Computation record. One owner; not safe for concurrent mutation."""

    def __init__(self, dtype=np.float64, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._tap_cache: dict = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        arr = np.array(value, dtype=self.dtype)
        t = self._append(arr, (), None, requires_grad=True, name=name)
        self._leaves[t.id] = t
        return t

    def const(self, value, dtype=None) -> Tensor:
        arr = np.asarray(value, dtype=dtype or self.dtype)
        return self._append(arr, (), None, requires_grad=False)

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def record(self, value: np.ndarray, parents: Sequence[Tensor],
               backward: Backward, dtype=None) -> Tensor:
        """Append the output of a primitive. ``backward`` maps the output
        gradient to one gradient (or None) per parent.

        ``dtype`` overrides the graph precision for this node (geometry is
        kept in float64 even in 32-bit graphs).
        """
        value = np.asarray(value, dtype=dtype or self.dtype)
        for p in parents:
            if p.graph is not self:
                raise GraphError("operand belongs to a different graph")
        needs = any(p.requires_grad for p in parents)
        return self._append(value, tuple(p.id for p in parents),
                            backward if needs else None, needs)

    def _append(self, value, parents, backward, requires_grad, name=None):
        nid = len(self._nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced at node {nid}")
        self._nodes.append(_Node(parents, backward))
        return Tensor(self, nid, value, requires_grad, name)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None
                 ) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss``; keys are tensor ids.

        Unused leaves get exact zeros.
        """
        if loss.graph is not self or loss.id >= len(self._nodes):
            raise GraphError("loss node is not in this graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        targets = list(self._leaves.values()) if wrt is None else list(wrt)
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for nid in range(loss.id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            if nid not in self._leaves:
                del grads[nid]
            pgrads = node.backward(g)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for t in targets:
            g = grads.get(t.id)
            out[t.id] = np.zeros_like(t.value) if g is None else np.asarray(
                g, dtype=self.dtype).reshape(t.shape)
        return out


def _as_tensor(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.const(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise GraphError("at least one operand must be a Tensor")


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        return a.graph.record(a.value + b, (a,), lambda g: (g,))
    g_ = _graph_of(a, b)
    a, b = _as_tensor(g_, a), _as_tensor(g_, b)
    _check_same(a, b, "add")
    return g_.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return a.graph.record(a.value - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(neg(b), a)
    g_ = _graph_of(a, b)
    a, b = _as_tensor(g_, a), _as_tensor(g_, b)
    _check_same(a, b, "sub")
    return g_.record(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return a.graph.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        return a.graph.record(a.value * b, (a,), lambda g: (g * b,))
    g_ = _graph_of(a, b)
    a, b = _as_tensor(g_, a), _as_tensor(g_, b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return g_.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    if _is_scalar(b):
        if b == 0:
            raise ZeroDivisionError(f"division by zero scalar at node {len(a.graph)}")
        return a.graph.record(a.value / b, (a,), lambda g: (g / b,))
    g_ = _graph_of(a, b)
    b = _as_tensor(g_, b)
    if np.any(b.value == 0):
        raise ZeroDivisionError(f"division by zero at node {len(g_)}")
    bv = b.value
    if _is_scalar(a):
        out = a / bv
        return g_.record(out, (b,), lambda g: (-g * out / bv,))
    a = _as_tensor(g_, a)
    _check_same(a, b, "div")
    out = a.value / bv
    return g_.record(out, (a, b), lambda g: (g / bv, -g * out / bv))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.value)
    return a.graph.record(np.abs(a.value), (a,), lambda g: (g * s,))


def elu(a: Tensor) -> Tensor:
    """ELU with alpha=1."""
    x = a.value
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    slope = np.where(x > 0, 1.0, neg_part + 1.0)
    return a.graph.record(out, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.graph.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.graph.record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError(f"log of nonpositive value at node {len(a.graph)}")
    return a.graph.record(np.log(x), (a,), lambda g: (g / x,))


def sin(a: Tensor) -> Tensor:
    x = a.value
    return a.graph.record(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.value
    return a.graph.record(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return a.graph.record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a: Tensor) -> Tensor:
    return a.graph.const(a.value)


_UNARY = {"abs": abs_, "elu": elu, "sigmoid": sigmoid, "exp": exp,
          "log": log, "sin": sin, "cos": cos, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# --------------------------------------------------------------------------
# shape and reductions


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return a.graph.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(src),)

    return a.graph.record(np.broadcast_to(a.value, shape).copy(), (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return a.graph.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    g_ = _graph_of(*xs)
    xs = [_as_tensor(g_, x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return g_.record(np.concatenate([x.value for x in xs], axis=ax), xs, bw)


def index(a: Tensor, key) -> Tensor:
    src_shape, dt = a.shape, a.value.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dt)
        np.add.at(out, key, g)
        return (out,)

    return a.graph.record(a.value[key], (a,), bw)


def split_last(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(index(a, (Ellipsis, slice(start, start + n))))
        start += n
    if start != a.shape[-1]:
        raise ValueError(f"split sizes {sizes} do not cover {a.shape[-1]}")
    return out


# --------------------------------------------------------------------------
# dense layers and softmax


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x @ W + b over the last axis of ``x``."""
    g_ = _graph_of(x, W, b)
    x, W, b = (_as_tensor(g_, v) for v in (x, W, b))
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"linear: dimension mismatch x{x.shape} W{W.shape} b{b.shape}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, W.shape[0])
    Wv = W.value
    out = (x2 @ Wv + b.value).reshape(lead + (W.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, Wv.shape[1])
        gx = (g2 @ Wv.T).reshape(lead + (Wv.shape[0],))
        return gx, x2.T @ g2, g2.sum(axis=0)

    return g_.record(out, (x, W, b), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return x.graph.record(out, (x,), bw)


def weighted_sum(w: Tensor, values: Tensor) -> Tensor:
    """sum_k w[..., k] * values[..., k, c] -> [..., c]."""
    g_ = _graph_of(w, values)
    w, values = _as_tensor(g_, w), _as_tensor(g_, values)
    if values.shape[:-1] != w.shape:
        raise ValueError(f"weighted_sum: {w.shape} vs {values.shape}")
    wv, vv = w.value, values.value
    out = np.einsum("...k,...kc->...c", wv, vv)

    def bw(g):
        return (np.einsum("...c,...kc->...k", g, vv),
                wv[..., None] * g[..., None, :])

    return g_.record(out, (w, values), bw)


# --------------------------------------------------------------------------
# sampling and filtering


class _Taps:
    """Bilinear footprint of a coordinate array: padded flat indices into a
    ``[H+2, W+2]`` raster whose border holds the fill value, tap weights and
    in-raster masks."""

    def __init__(self, coords: np.ndarray, H: int, W: int, dtype):
        u, v = coords[..., 0], coords[..., 1]
        x0f = np.floor(u)
        y0f = np.floor(v)
        fx = (u - x0f).astype(dtype)
        fy = (v - y0f).astype(dtype)
        # far-away taps are clipped onto the fill border, per tap
        x0 = np.clip(x0f, -2, W).astype(np.int64)
        y0 = np.clip(y0f, -2, H).astype(np.int64)
        self.fx, self.fy = fx, fy
        self.idx, self.w, self.inside = [], [], []
        self.validity = 0.0
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            xi = np.clip(x0 + dx, -1, W)
            yi = np.clip(y0 + dy, -1, H)
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            self.idx.append((yi + 1) * (W + 2) + (xi + 1))
            self.w.append(w)
            self.inside.append(inside)
            self.validity = self.validity + w * inside

    def derivative_weights(self):
        """d(weight)/du and d(weight)/dv for each tap."""
        fx, fy = self.fx, self.fy
        out = []
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            out.append(((1.0 if dx else -1.0) * wy, (1.0 if dy else -1.0) * wx))
        return out


def _taps(graph: "Graph", coords: Tensor, H: int, W: int) -> _Taps:
    key = (coords.id, H, W)
    taps = graph._tap_cache.get(key)
    if taps is None:
        taps = graph._tap_cache[key] = _Taps(coords.value, H, W, graph.dtype)
    return taps


def _pad_fill(src: np.ndarray, fill: float) -> np.ndarray:
    H, W = src.shape[:2]
    out = np.full((H + 2, W + 2) + src.shape[2:], fill, dtype=src.dtype)
    out[1:-1, 1:-1] = src
    return out


def bilinear_sample(src: Tensor, coords, fill: float = 0.0
                    ) -> tuple[Tensor, np.ndarray]:
    """Sample ``src[H,W,C]`` at continuous pixel ``coords[...,2]`` (u right,
    v down, pixel centers on integers).

    Taps outside the raster read ``fill``. Returns the samples and the
    fraction of bilinear weight that landed inside (no gradient).
    """
    g_ = _graph_of(src, coords)
    src, coords = _as_tensor(g_, src), _as_tensor(g_, coords)
    H, W, C = src.shape
    flat = _pad_fill(src.value, fill).reshape(-1, C)
    taps = _taps(g_, coords, H, W)
    vals = [flat[idx] for idx in taps.idx]
    out = 0.0
    for val, w in zip(vals, taps.w):
        out = out + w[..., None] * val
    dt = g_.dtype

    def bw(g):
        gsrc = None
        if src.requires_grad:
            n = (H + 2) * (W + 2) * C
            gsrc = np.zeros(n, dtype=dt)
            for idx, w in zip(taps.idx, taps.w):
                fidx = (idx[..., None] * C + np.arange(C)).ravel()
                gsrc += np.bincount(fidx, weights=(w[..., None] * g).ravel(), minlength=n)
            gsrc = gsrc.reshape(H + 2, W + 2, C)[1:-1, 1:-1]
        gc = None
        if coords.requires_grad:
            du = dv = 0.0
            for val, (dwx, dwy) in zip(vals, taps.derivative_weights()):
                gv = (g * val).sum(-1)
                du = du + dwx * gv
                dv = dv + dwy * gv
            gc = np.stack([du, dv], axis=-1)
        return gsrc, gc

    out_t = g_.record(out, (src, coords), bw)
    return out_t, np.asarray(taps.validity, dtype=dt)


def bilinear_sample_channels(src: Tensor, coords, fill: float = 0.0
                             ) -> tuple[Tensor, np.ndarray]:
    """Channel ``k`` of ``src[H,W,K]`` sampled at ``coords[...,K,2]``.

    Output has shape ``coords.shape[:-1]``.
    """
    g_ = _graph_of(src, coords)
    src, coords = _as_tensor(g_, src), _as_tensor(g_, coords)
    H, W, K = src.shape
    if coords.shape[-2] != K:
        raise ValueError(f"coords channel axis {coords.shape[-2]} != {K}")
    flat = _pad_fill(src.value, fill).ravel()
    chan = np.arange(K)
    taps = _taps(g_, coords, H, W)
    fidxs = [idx * K + chan for idx in taps.idx]
    vals = [flat[f] for f in fidxs]
    out = 0.0
    for val, w in zip(vals, taps.w):
        out = out + w * val
    dt = g_.dtype

    def bw(g):
        gsrc = None
        if src.requires_grad:
            n = (H + 2) * (W + 2) * K
            gsrc = np.zeros(n, dtype=dt)
            for fidx, w in zip(fidxs, taps.w):
                gsrc += np.bincount(fidx.ravel(), weights=(w * g).ravel(), minlength=n)
            gsrc = gsrc.reshape(H + 2, W + 2, K)[1:-1, 1:-1]
        gc = None
        if coords.requires_grad:
            du = dv = 0.0
            for val, (dwx, dwy) in zip(vals, taps.derivative_weights()):
                du = du + dwx * val
                dv = dv + dwy * val
            gc = np.stack([g * du, g * dv], axis=-1)
        return gsrc, gc

    out_t = g_.record(out, (src, coords), bw)
    return out_t, np.asarray(taps.validity, dtype=dt)


def _reflect_index(n: int, r: int) -> np.ndarray:
    i = np.arange(-r, n + r)
    i = np.where(i < 0, -i, i)
    return np.where(i >= n, 2 * (n - 1) - i, i)


def conv2d_fixed(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Per-channel 2-D correlation with a constant odd-sized stencil,
    reflect padding (edge pixel not repeated)."""
    k = np.asarray(kernel, dtype=x.graph.dtype)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dimensions must be odd")
    H, W, C = x.shape
    ry, rx = kh // 2, kw // 2
    if kh > H or kw > W:
        raise ValueError(f"kernel {k.shape} larger than image {(H, W)}")
    iy, ix = _reflect_index(H, ry), _reflect_index(W, rx)
    xp = x.value[iy][:, ix]
    out = np.zeros_like(x.value)
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0:
                out += k[a, b] * xp[a:a + H, b:b + W]

    def bw(g):
        gp = np.zeros((H + 2 * ry, W + 2 * rx, C), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                if k[a, b] != 0:
                    gp[a:a + H, b:b + W] += k[a, b] * g
        gx = np.zeros((H, W + 2 * rx, C), dtype=g.dtype)
        np.add.at(gx, iy, gp)
        out_g = np.zeros((H, W, C), dtype=g.dtype)
        np.add.at(out_g, (slice(None), ix), gx)
        return (out_g,)

    return x.graph.record(out, (x,), bw)


def box_kernel(size: int) -> np.ndarray:
    return np.full((size, size), 1.0 / (size * size))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


# --------------------------------------------------------------------------
# gradient verification


def gradients(f: Callable[[Graph, dict], Tensor], params: dict[str, np.ndarray],
              dtype=np.float64) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f(graph, leaves)`` and return (value, grads by name)."""
    g = Graph(dtype=dtype)
    leaves = {k: g.leaf(v, name=k) for k, v in params.items()}
    loss = f(g, leaves)
    grads = g.backward(loss, wrt=leaves.values())
    return float(loss.value), {k: grads[t.id] for k, t in leaves.items()}


def finite_diff_check(f: Callable[[Graph, dict], Tensor],
                      params: dict[str, np.ndarray], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0,
                      report: dict | None = None) -> float:
    """Max over checked coordinates of |analytic - central FD| / max(1, |analytic|).

    ``max_coords`` limits the number of probed coordinates per parameter
    (chosen with a seeded RNG); None probes all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        g = Graph(dtype=np.float64)
        out = f(g, {k: g.leaf(v, name=k) for k, v in p.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise FloatingPointError("objective is not finite")
        return val

    _, analytic = gradients(f, params, dtype=np.float64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        n = arr.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        name_worst = 0.0
        for i in idx:
            flat = arr.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up = value(params)
            flat[i] = orig - eps
            dn = value(params)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a))
            name_worst = max(name_worst, err)
        if report is not None:
            report[name] = name_worst
        worst = max(worst, name_worst)
    return worst
