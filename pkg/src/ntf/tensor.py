"""Dense tensors with a tape-based reverse-mode gradient.

Operations only record onto a :class:`GradTape` while one is active, so
forward passes outside a ``with GradTape()`` block are plain numpy
arithmetic. Every op checks its output for non-finite values and raises
:class:`NumericError` instead of letting NaN/Inf spread.

Gradient contributions reaching the same tensor from several consumers
are summed in a canonical (value-sorted) order, which makes the result
independent of the order the branches were recorded in.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

_ACTIVE_TAPES: list["GradTape"] = []


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operators delegate to the module-level functions below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are appended in order and
    :meth:`backward` replays them in reverse, visiting each exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _record(self, out, parents, backward):
        node = _Node(out, parents, backward)
        for p in parents:
            if p.requires_grad and p._node is None:
                self._leaves.setdefault(id(p), p)
        out._node = node
        self.nodes.append(node)

    @property
    def leaves(self):
        return list(self._leaves.values())

    def backward(self, loss, params=None):
        """Return ``{tensor: gradient}`` for ``params`` (default: all leaves seen).

        Requested tensors the loss does not depend on get zero gradients.
        Each leaf's ``.grad`` is also set.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or not any(n is loss._node for n in self.nodes):
            raise ContractError("loss was not produced under this tape")
        pending: dict[int, list] = {id(loss): [np.ones_like(loss.data)]}
        for node in reversed(self.nodes):
            contribs = pending.pop(id(node.out), None)
            if contribs is None:
                continue
            g = _accumulate(contribs)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pending.setdefault(id(parent), []).append(pg)
        targets = self.leaves if params is None else list(params)
        grads = {}
        for t in targets:
            contribs = pending.get(id(t))
            g = _accumulate(contribs) if contribs else np.zeros_like(t.data)
            if g.shape != t.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {t.shape}")
            t.grad = g
            grads[t] = g
        return grads


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def _accumulate(contribs):
    if len(contribs) == 1:
        return contribs[0]
    if len(contribs) == 2:
        return contribs[0] + contribs[1]
    # three or more addends: sort per element so the sum ignores arrival order
    stacked = np.sort(np.stack(contribs), axis=0)
    out = stacked[0].copy()
    for row in stacked[1:]:
        out += row
    return out


def _make(out_data, parents, backward_fn, where):
    _check_finite(out_data, where)
    out = Tensor._wrap(out_data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE_TAPES[-1]._record(out, parents, backward_fn)
    return out


def make_op(out_data, parents, backward_fn, where="custom op"):
    """Build a differentiable op from a forward result and a backward closure.

    ``backward_fn(g)`` receives the output gradient and returns one array
    (or ``None``) per parent.
    """
    return _make(out_data, tuple(parents), backward_fn, where)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dot(a, b):
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: {a.shape} . {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad), "dot")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def tsum(a, axis=None):
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a):
    return scale(tsum(a), 1.0 / a.size)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def global_mean_pool(x):
    """Average over the two trailing spatial axes: B×C×H×W -> B×C."""
    if x.ndim != 4:
        raise DimensionError(f"global_mean_pool expects 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / g.dtype.type(n))[:, :, None, None], (B, C, H, W)).copy(),)

    return _make(out, (x,), back, "global_mean_pool")


def l2_normalize(v, eps=1e-12):
    """Scale each vector along the last axis to unit length (guarded by ``eps``)."""
    x = v.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, x.dtype.type(eps))
    y = x / denom

    def back(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / denom),)

    return _make(y, (v,), back, "l2_normalize")


def conv2d(x, w, stride=1, pad=0):
    """Zero-padded 2-d cross-correlation of B×C×H×W input with F×C×k×k weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (B*Ho*Wo) x (C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (gmat.T @ cols).reshape(F, C, kh, kw)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw

    return _make(out, (x, w), back, "conv2d")


# ------------------------------------------------------------ verification


def finite_diff_check(f, params, h=1e-6):
    """Largest relative gap between tape gradients and central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    current contents of ``params``. The error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = list(params)
    with GradTape() as tape:
        loss = f()
    grads = tape.backward(loss, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = grads[p].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite objective while probing coordinate {idx}")
            numeric = (fp - fm) / (2 * h)
            err = abs(ga[idx] - numeric) / max(1.0, abs(ga[idx]))
            worst = max(worst, float(err))
    return worst


# ------------------------------------------------------------------ random


class Rng:
    """Seeded counter-based generator (Philox) with derivable substreams.

    ``Rng(seed, stream_id)`` always yields the same sequence; substreams
    with distinct ids are independent by construction of the key schedule.
    """

    def __init__(self, seed, stream_id=()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *ids):
        return Rng(self.seed, self.stream_id + tuple(ids))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def he_uniform(shape, fan_in, rng, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
