"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`; outside
of a tape nothing is recorded, which is how inference runs.  A tape is
backward-once: calling :meth:`Tape.backward` consumes it.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "DimensionError", "NumericError",
    "tensor", "zeros", "as_tensor", "no_grad_value",
    "matmul", "matexp", "bilinear_sample", "scan_linear", "linear_scan",
    "concat", "stack", "exp", "log", "tanh", "sigmoid", "softplus", "gelu",
    "absolute", "sqrt", "softmax", "masked_softmax", "masked_log_softmax", "log_softmax", "where",
    "reshape", "transpose", "getitem", "tsum", "tmean", "add", "sub", "mul", "div", "power",
    "take", "unfold2d", "upsample2x", "grad_check", "channel_scan",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or supplied."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def record(self, out, parents, backward):
        self.nodes.append((out, parents, backward))

    def backward(self, loss: "Tensor"):
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.data.shape)
                else:
                    p.grad = p.grad + pg
            if out._parents:
                # intermediates keep no gradient after their node has fired
                out.grad = None
        self.nodes.clear()


class Tensor:
    """N-d float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self):
        tape = _active_tape()
        if tape is None:
            raise RuntimeError("backward() called outside of a Tape context; use tape.backward(loss)")
        tape.backward(self)

    def zero_grad(self):
        self.grad = None

    # arithmetic
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, k): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self): return transpose(self)

    def transpose(self, *axes): return transpose(self, axes or None)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(arr: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** k, (a,), lambda g: (g * k * ad ** (k - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh form."""
    a = as_tensor(a)
    x = a.data
    th = np.tanh(_GELU_K * (x + 0.044715 * x * x * x))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dth = (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * dth),)
    return _make(out, (a,), back)


def where(mask, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(m, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(m, g, 0.0), sa),
                            _unbroadcast(np.where(m, 0.0, g), sb)))


# shape ------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), back)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with integer ``index``; duplicates accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim

    def back(g):
        k = index.ndim
        gm = np.moveaxis(g, list(range(axis, axis + k)), list(range(k))).reshape(index.size, -1)
        n = shape[axis]
        flat = index.reshape(-1)
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        out = np.asarray(scatter @ gm)
        rest = tuple(np.delete(np.array(shape), axis))
        out = out.reshape((n,) + rest)
        return (np.moveaxis(out, 0, axis),)
    return _make(np.take(a.data, index, axis=axis), (a,), back)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in items], axis=axis), items,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    n = len(items)
    return _make(np.stack([t.data for t in items], axis=axis), items,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# reductions with structure -----------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_softmax(a, mask, axis=-1) -> Tensor:
    """Softmax over entries where ``mask`` is true; all-false slices give zeros."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    x = np.where(m, a.data, -np.inf)
    mx = x.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(np.where(m, a.data, 0.0) - mx), 0.0)
    den = e.sum(axis=axis, keepdims=True)
    out = e / np.where(den > 0, den, 1.0)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_log_softmax(a, mask, axis=-1) -> Tensor:
    """Log of :func:`masked_softmax` on masked entries; 0 (with zero gradient) elsewhere."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    x = np.where(m, a.data, -np.inf)
    mx = x.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(np.where(m, a.data, 0.0) - mx), 0.0)
    den = e.sum(axis=axis, keepdims=True)
    lse = np.log(np.where(den > 0, den, 1.0)) + mx
    out = np.where(m, a.data - lse, 0.0)
    sm = e / np.where(den > 0, den, 1.0)

    def back(g):
        g = np.where(m, g, 0.0)
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), back)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product (batched over leading axes, numpy rules)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {ad.shape} @ {bd.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(ad @ bd, (a, b), back)


_TAYLOR_DEGREE = 13


def _expm(a: np.ndarray) -> np.ndarray:
    """Scaling-and-squaring exponential of a stack of square matrices."""
    m = a.shape[-1]
    batch = a.reshape(-1, m, m)
    norms = np.abs(batch).sum(axis=-2).max(axis=-1)
    s = np.zeros(len(batch), dtype=np.int64)
    big = norms > 0.5
    s[big] = np.ceil(np.log2(norms[big] / 0.5)).astype(np.int64)
    scaled = batch / (2.0 ** s)[:, None, None]
    eye = np.eye(m)
    # Horner: I + X(I + X/2(I + X/3(...)))
    out = np.broadcast_to(eye, scaled.shape).copy()
    for k in range(_TAYLOR_DEGREE, 0, -1):
        out = eye + (scaled @ out) / k
    for i in range(int(s.max(initial=0))):
        sel = s > i
        out[sel] = out[sel] @ out[sel]
    return out.reshape(a.shape)


def matexp(u) -> Tensor:
    """Matrix exponential of ``u`` (``[..., M, M]``), differentiable.

    The adjoint uses the block identity
    ``expm([[X, E], [0, X]]) = [[e^X, L(X, E)], [0, e^X]]`` with ``X = uᵀ``.
    """
    u = as_tensor(u)
    if u.ndim < 2 or u.shape[-1] != u.shape[-2]:
        raise DimensionError(f"matexp needs square matrices, got {u.shape}")
    ud = u.data
    m = ud.shape[-1]

    def back(g):
        xt = np.swapaxes(ud, -1, -2)
        blk = np.zeros(ud.shape[:-2] + (2 * m, 2 * m))
        blk[..., :m, :m] = xt
        blk[..., m:, m:] = xt
        blk[..., :m, m:] = g
        return (_expm(blk)[..., :m, m:],)
    return _make(_expm(ud), (u,), back)


_SNAP_PX = 1e-10


def _bilinear_taps(coords: np.ndarray, h: int, w: int):
    """Tap indices, weights and weight derivatives for align-corners sampling."""
    k = coords.shape[0]
    taps_idx, taps_w, taps_dx, taps_dy = [], [], [], []

    def axis_taps(c, n):
        if n == 1:
            inside = np.abs(c) <= 1.0
            i0 = np.zeros(k, dtype=np.int64)
            return [(i0, inside.astype(float), np.zeros(k), inside)]
        x = (c + 1.0) * 0.5 * (n - 1)
        # round-off from the normalization must not move a pixel-centre sample
        xr = np.round(x)
        x = np.where(np.abs(x - xr) < _SNAP_PX, xr, x)
        x0 = np.floor(x)
        f = x - x0
        x0 = x0.astype(np.int64)
        scale = 0.5 * (n - 1)
        res = []
        for off, wt, dwt in ((0, 1.0 - f, -scale), (1, f, scale)):
            idx = x0 + off
            ok = (idx >= 0) & (idx < n)
            res.append((np.clip(idx, 0, n - 1), wt, np.full(k, dwt), ok))
        return res

    xt = axis_taps(coords[:, 0], w)
    yt = axis_taps(coords[:, 1], h)
    for xi, wx, dwx, okx in xt:
        for yi, wy, dwy, oky in yt:
            ok = okx & oky
            taps_idx.append(yi * w + xi)
            taps_w.append(np.where(ok, wx * wy, 0.0))
            taps_dx.append(np.where(ok, dwx * wy, 0.0))
            taps_dy.append(np.where(ok, wx * dwy, 0.0))
    return taps_idx, taps_w, taps_dx, taps_dy


def bilinear_sample(feat, coords) -> Tensor:
    """Sample ``feat`` [C, H, W] at normalized ``coords`` [K, 2] (x, y) -> [C, K].

    Coordinates use the align-corners convention: -1 and +1 are the centres of
    the first and last pixels.  Taps falling outside the image contribute 0.
    """
    feat, coords = as_tensor(feat), as_tensor(coords)
    if feat.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"bilinear_sample expects [C,H,W] and [K,2], got {feat.shape}, {coords.shape}")
    c, h, w = feat.shape
    cd = coords.data
    k = cd.shape[0]
    idx, wts, dxs, dys = _bilinear_taps(cd, h, w)
    rows = np.tile(np.arange(k), len(idx))
    cols = np.concatenate(idx)
    smat = sp.csr_matrix((np.concatenate(wts), (rows, cols)), shape=(k, h * w))
    flat = feat.data.reshape(c, h * w)
    out = np.asarray((smat @ flat.T).T)

    def back(g):
        gfeat = np.asarray((smat.T @ g.T).T).reshape(c, h, w) if feat.requires_grad else None
        gco = None
        if coords.requires_grad:
            dx = np.zeros((c, k))
            dy = np.zeros((c, k))
            for ti, tdx, tdy in zip(idx, dxs, dys):
                vals = flat[:, ti]
                dx += vals * tdx
                dy += vals * tdy
            gco = np.stack([(g * dx).sum(0), (g * dy).sum(0)], axis=1)
        return gfeat, gco
    return _make(out, (feat, coords), back)


def linear_scan(a, u, h0=None, reverse: bool = False) -> Tensor:
    """Batched recurrence ``h_t = A_g h_{t-1} + u_t``.

    ``a``: [G, M, M]; ``u``: [T, G, M, B]; ``h0``: [G, M, B] or None (zeros).
    Returns all states, [T, G, M, B].  ``reverse`` runs from t = T-1 down to 0.
    """
    a, u = as_tensor(a), as_tensor(u)
    parents = [a, u]
    if h0 is not None:
        h0 = as_tensor(h0)
        parents.append(h0)
    ad, ud = a.data, u.data
    t_len, g_n, m, b = ud.shape
    if ad.shape != (g_n, m, m):
        raise DimensionError(f"state matrix {ad.shape} does not match inputs {ud.shape}")
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    hs = np.empty_like(ud)
    h = np.zeros((g_n, m, b)) if h0 is None else h0.data
    h_init = h
    for t in order:
        h = ad @ h + ud[t]
        hs[t] = h

    def back(gh):
        at = np.swapaxes(ad, -1, -2)
        adj = np.empty_like(gh)
        lam = np.zeros((g_n, m, b))
        for t in reversed(order):
            lam = gh[t] + at @ lam
            adj[t] = lam
        prev = np.empty_like(hs)
        if reverse:
            prev[:-1] = hs[1:]
            prev[-1] = h_init
        else:
            prev[1:] = hs[:-1]
            prev[0] = h_init
        ga = np.einsum("tgmb,tgnb->gmn", adj, prev)
        first = order[0] if t_len else 0
        gh0 = (at @ adj[first]) if t_len else np.zeros((g_n, m, b))
        grads = [ga, adj]
        if h0 is not None:
            grads.append(gh0)
        return tuple(grads)
    return _make(hs, parents, back)


def channel_scan(a, w, x, direction: str = "forward") -> Tensor:
    """Per-channel scans summed over channels.

    ``a``: [C, M, M] transitions, ``w``: [C, M] input weights, ``x``: [T, C, B].
    Channel c runs ``h_t = a_c h_{t-1} + w_c x_{t,c}`` from a zero state and the
    result is ``y_t = Σ_c h_t`` with shape [T, M, B].  ``direction`` is
    ``"forward"``, ``"reverse"`` or ``"both"`` (mean of the two).  Both
    directions share one loop over t.
    """
    a, w, x = as_tensor(a), as_tensor(w), as_tensor(x)
    t_len, c, b = x.shape
    m = w.shape[1]
    if a.shape != (c, m, m) or w.shape != (c, m):
        raise DimensionError(f"channel_scan operands disagree: {a.shape}, {w.shape}, {x.shape}")
    dirs = {"forward": (False,), "reverse": (True,), "both": (False, True)}.get(direction)
    if dirs is None:
        raise ValueError(f"unknown scan direction {direction!r}")
    nd = len(dirs)
    scale = 1.0 / nd
    a2 = np.concatenate([a.data] * nd)                                  # [D*C, M, M]
    w2 = np.concatenate([w.data] * nd)[:, :, None]                      # [D*C, M, 1]
    x2 = np.concatenate([x.data[::-1] if r else x.data for r in dirs], axis=1)   # [T, D*C, B]
    hs = np.empty((t_len, nd * c, m, b))
    h = np.zeros((nd * c, m, b))
    for t in range(t_len):
        h = a2 @ h + w2 * x2[t][:, None, :]
        hs[t] = h
    per_dir = hs.reshape(t_len, nd, c, m, b).sum(axis=2)                # [T, D, M, B]
    out = np.zeros((t_len, m, b))
    for k, r in enumerate(dirs):
        out += per_dir[::-1, k] if r else per_dir[:, k]
    out *= scale

    def back(g):
        g2 = np.stack([g[::-1] if r else g for r in dirs], axis=1) * scale      # [T, D, M, B]
        at = np.swapaxes(a2, -1, -2)
        w_row = np.swapaxes(w2, -1, -2)                                  # [D*C, 1, M]
        lam = np.zeros((nd * c, m, b))
        ga = np.zeros((nd * c, m, m))
        gw = np.zeros((nd * c, m, 1))
        gx2 = np.empty((t_len, nd * c, b))
        zero = np.zeros((nd * c, m, b))
        for t in range(t_len - 1, -1, -1):
            lam = np.repeat(g2[t], c, axis=0) + at @ lam
            prev = hs[t - 1] if t else zero
            ga += lam @ np.swapaxes(prev, -1, -2)
            xt = x2[t][:, :, None]
            gw += lam @ xt
            gx2[t] = (w_row @ lam)[:, 0, :]
        gw = gw[:, :, 0]
        ga = ga.reshape(nd, c, m, m).sum(axis=0)
        gw = gw.reshape(nd, c, m).sum(axis=0)
        gx = np.zeros((t_len, c, b))
        for k, r in enumerate(dirs):
            part = gx2[:, k * c:(k + 1) * c]
            gx += part[::-1] if r else part
        return ga, gw, gx
    return _make(out, (a, w, x), back)


def scan_linear(a_bar, b_bar, x, h0) -> Tensor:
    """Single-system scan: ``a_bar`` [M,M], ``b_bar`` [M,C], ``x`` [T,C], ``h0`` [M] -> [T,M]."""
    a_bar, b_bar, x, h0 = (as_tensor(v) for v in (a_bar, b_bar, x, h0))
    m = a_bar.shape[0]
    if a_bar.shape != (m, m) or b_bar.shape[0] != m or x.shape[1] != b_bar.shape[1] or h0.shape != (m,):
        raise DimensionError("scan_linear operand shapes disagree")
    u = matmul(x, b_bar.T)                       # [T, M]
    t = x.shape[0]
    hs = linear_scan(reshape(a_bar, (1, m, m)), reshape(u, (t, 1, m, 1)), reshape(h0, (1, m, 1)))
    return reshape(hs, (t, m))


# image ops --------------------------------------------------------------------

def _unfold_index(c, h, w, k, stride, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    oi = np.arange(ho) * stride
    oj = np.arange(wo) * stride
    ki, kj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = oi[:, None, None, None] + ki.reshape(1, 1, 1, -1)
    cols = oj[None, :, None, None] + kj.reshape(1, 1, 1, -1)
    chan = np.arange(c)[None, None, :, None]
    idx = chan * hp * wp + rows * wp + cols       # [ho, wo, c, k*k]
    return idx.reshape(ho * wo, c * k * k), ho, wo


def unfold2d(x, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """im2col: [B, C, H, W] -> [B, Ho*Wo, C*k*k] with zero padding."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    idx, ho, wo = _unfold_index(c, h, w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))).reshape(b, -1)
    npad = xp.shape[1]
    flat_idx = idx.reshape(-1)

    def back(g):
        gp = np.empty((b, npad))
        for i in range(b):
            gp[i] = np.bincount(flat_idx, weights=g[i].reshape(-1), minlength=npad)
        gp = gp.reshape(b, c, h + 2 * pad, w + 2 * pad)
        return (gp[:, :, pad:pad + h, pad:pad + w],)
    return _make(xp[:, idx], (x,), back)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of [B, C, H, W]."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


# verification ------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], theta, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor.  Component i's error is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)`` where the floor is
    1e-3 of the largest gradient magnitude (at least 1e-8), so that
    components that are zero up to round-off do not dominate.
    """
    x0 = np.array(no_grad_value(theta), dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise NumericError("f is not finite at theta")
    tape.backward(y)
    g_tape = np.zeros_like(x0) if x.grad is None else x.grad
    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals = []
        for step in (eps, -eps):
            xp = flat.copy()
            xp[i] += step
            v = f(Tensor(xp.reshape(x0.shape))).data
            if not np.isfinite(v).all():
                raise NumericError(f"f is not finite at component {i} offset {step}")
            vals.append(float(v.reshape(-1)[0]))
        g_fd.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * eps)
    if not x0.size:
        return 0.0
    mag = np.maximum(np.abs(g_tape), np.abs(g_fd))
    floor = max(1e-3 * float(mag.max()), 1e-8)
    return float(np.max(np.abs(g_tape - g_fd) / np.maximum(mag, floor)))
