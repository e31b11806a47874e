"""Batched 4-D tensors with reverse-mode gradients and an Adam optimizer.

Only the operations the fusion pipeline needs are provided.  Every tensor is
laid out as ``(batch, channels, height, width)``; scalars are ``(1, 1, 1, 1)``.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to the parent adjoints.  Tensors that do
not (transitively) depend on a ``requires_grad`` leaf record nothing, so
frozen computations cost no memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

DEFAULT_DTYPE = np.float32
DIV_EPS = 1e-6
PAD_MODES = {"zero": "constant", "reflect": "reflect", "symmetric": "symmetric"}


class Tensor:
    """Dense NCHW array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim > 4:
            raise DimensionError(f"tensors are at most 4-D, got shape {arr.shape}")
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
        if min(arr.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return eltwise(self, _lift(other, self), "add")

    __radd__ = __add__

    def __sub__(self, other):
        return eltwise(self, _lift(other, self), "sub")

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return eltwise(self, other, "mul")

    __rmul__ = __mul__


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), x, dtype=like.dtype))


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ----------------------------------------------------------------------------
# padding helpers


def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    return np.pad(np.arange(n), p, mode=PAD_MODES[mode])


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode not in PAD_MODES:
        raise ConfigError(f"unknown padding mode {mode!r}")
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if mode == "reflect" and min(x.shape[2:]) <= p:
        raise DimensionError(f"reflect padding {p} needs spatial size > {p}, got {x.shape[2:]}")
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=PAD_MODES[mode])


def _unpad(g: np.ndarray, p: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_pad`: fold a padded gradient back onto the source grid."""
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:p + h, p:p + w]
    rows = _pad_index(h, p, mode)
    tmp = g[:, :, p:p + h, :].copy()
    for t in list(range(p)) + list(range(p + h, h + 2 * p)):
        tmp[:, :, rows[t], :] += g[:, :, t, :]
    cols = _pad_index(w, p, mode)
    out = tmp[:, :, :, p:p + w].copy()
    for t in list(range(p)) + list(range(p + w, w + 2 * p)):
        out[:, :, :, cols[t]] += tmp[:, :, :, t]
    return out


# ----------------------------------------------------------------------------
# operations


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "zero") -> Tensor:
    """Same-size 2-D cross-correlation.

    ``weight`` has shape ``(Cout, Cin, k, k)`` with odd ``k``; ``bias`` has
    shape ``(1, Cout, 1, 1)``.
    """
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"kernel must be square with odd size, got {k}x{k2}")
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels but kernel expects {cin}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    p = k // 2
    xp = _pad(x.data, p, padding)
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    cols = cols.reshape(n, c * k * k, h * w)
    wm = weight.data.reshape(cout, c * k * k)
    out = np.matmul(wm, cols).reshape(n, cout, h, w)
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gflat = g.reshape(n, cout, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gflat).reshape(n, c, k, k, h, w)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = _unpad(gxp, p, padding, h, w)
        if weight.requires_grad:
            gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, parents, back, "conv2d")


def separable_conv2d(x: Tensor, taps: np.ndarray, padding: str = "symmetric") -> Tensor:
    """Per-channel separable correlation with constant 1-D taps.

    ``taps`` has shape ``(C, m)`` or ``(1, m)`` (shared by all channels); the
    2-D kernel of channel ``c`` is ``outer(taps[c], taps[c])``.
    """
    taps = np.asarray(taps, dtype=x.dtype)
    if taps.ndim != 2 or taps.shape[1] % 2 == 0:
        raise ConfigError(f"taps must be (bands, odd m), got {taps.shape}")
    n, c, h, w = x.shape
    if taps.shape[0] not in (1, c):
        raise DimensionError(f"{taps.shape[0]} tap bands cannot filter {c} channels")
    m = taps.shape[1]
    p = m // 2
    t = taps[None, :, :, None, None]
    xp = _pad(x.data, p, padding)
    tmp = np.zeros((n, c, h, xp.shape[3]), dtype=x.dtype)
    for i in range(m):
        tmp += t[:, :, i] * xp[:, :, i:i + h, :]
    out = np.zeros((n, c, h, w), dtype=x.dtype)
    for j in range(m):
        out += t[:, :, j] * tmp[:, :, :, j:j + w]

    def back(g):
        gtmp = np.zeros(tmp.shape, dtype=g.dtype)
        for j in range(m):
            gtmp[:, :, :, j:j + w] += t[:, :, j] * g
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(m):
            gxp[:, :, i:i + h, :] += t[:, :, i] * gtmp
        return (_unpad(gxp, p, padding, h, w),)

    return _result(out, (x,), back, "separable_conv2d")


def upsample_matrix(n: int, r: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Linear map from ``n`` samples to ``r*n`` half-pixel-centred bilinear samples."""
    if r < 1:
        raise ConfigError(f"upsampling ratio must be >= 1, got {r}")
    out = np.zeros((r * n, n), dtype=np.float64)
    coord = np.clip((np.arange(r * n) + 0.5) / r - 0.5, 0.0, n - 1)
    i0 = np.floor(coord).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coord - i0
    rows = np.arange(r * n)
    np.add.at(out, (rows, i0), 1.0 - frac)
    np.add.at(out, (rows, i1), frac)
    return out.astype(dtype)


def bilinear_upsample(x: Tensor, r: int) -> Tensor:
    """Integer-ratio bilinear upsampling with half-pixel centres and edge clamping."""
    if int(r) != r or r < 1:
        raise ConfigError(f"upsampling ratio must be a positive integer, got {r}")
    r = int(r)
    if r == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    _, _, h, w = x.shape
    uh = upsample_matrix(h, r, x.dtype)
    uw = upsample_matrix(w, r, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def back(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _result(out, (x,), back, "upsample")


def guard_denominator(d: np.ndarray, eps: float = DIV_EPS) -> np.ndarray:
    """Sign-preserving clamp ``sign(d) * max(|d|, eps)``; zero maps to ``+eps``."""
    sign = np.where(d < 0, -1.0, 1.0).astype(d.dtype)
    return sign * np.maximum(np.abs(d), eps).astype(d.dtype)


def _sum_to_channels(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def eltwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise ``add``, ``sub``, ``mul`` or ``div_guard``.

    ``b`` may have a single channel, in which case it is broadcast over the
    channels of ``a``.
    """
    if a.shape != b.shape:
        ok = b.shape[1] == 1 and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3])
        if not ok:
            raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if kind == "add":
        out = ad + bd

        def back(g):
            return g, _sum_to_channels(g, b.shape)
    elif kind == "sub":
        out = ad - bd

        def back(g):
            return g, _sum_to_channels(-g, b.shape)
    elif kind == "mul":
        out = ad * bd

        def back(g):
            ga = g * bd if a.requires_grad else None
            gb = _sum_to_channels(g * ad, b.shape) if b.requires_grad else None
            return ga, gb
    elif kind == "div_guard":
        den = guard_denominator(bd)
        out = ad / den

        def back(g):
            ga = g / den if a.requires_grad else None
            gb = None
            if b.requires_grad:
                active = np.abs(bd) >= DIV_EPS
                gb = _sum_to_channels(np.where(active, -g * ad / (den * den), 0.0).astype(g.dtype), b.shape)
            return ga, gb
    else:
        raise ConfigError(f"unknown elementwise kind {kind!r}")
    return _result(out, (a, b), back, kind)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), back, "concat")


def decimate_tensor(x: Tensor, r: int, offset: int | None = None) -> Tensor:
    """Keep every ``r``-th row and column starting at ``offset`` (default ``r // 2``)."""
    off = r // 2 if offset is None else offset
    out = np.ascontiguousarray(x.data[:, :, off::r, off::r])

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, off::r, off::r] = g
        return (full,)

    return _result(out, (x,), back, "decimate")


def l1_mean(a: Tensor, b) -> Tensor:
    """Mean absolute difference, returned as a ``(1, 1, 1, 1)`` tensor."""
    if not isinstance(b, Tensor):
        b = Tensor(np.full(a.shape, b, dtype=a.dtype))
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    count = diff.size
    val = np.abs(diff, dtype=np.float64).sum() / count
    out = np.full((1, 1, 1, 1), val, dtype=a.dtype)

    def back(g):
        s = np.sign(diff) * (g.reshape(()) / count)
        return (s if a.requires_grad else None, -s if b.requires_grad else None)

    return _result(out, (a, b), back, "l1_mean")


def add_all(terms: Iterable[Tensor]) -> Tensor:
    """Sum tensors left to right (fixed order keeps results reproducible)."""
    terms = list(terms)
    total = terms[0]
    for t in terms[1:]:
        total = eltwise(total, t, "add")
    return total


# ----------------------------------------------------------------------------
# reverse pass


@dataclass
class TapeGraph:
    """Topologically ordered record of the nodes feeding ``output``."""

    nodes: list
    output: Tensor

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def index(self, node: Tensor) -> int:
        return next(i for i, n in enumerate(self.nodes) if n is node)


def trace(output: Tensor) -> TapeGraph:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return TapeGraph(order, output)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    When ``params`` is given their gradients are reset first, so leaves the
    loss does not reach end up with zeros; the list of gradients is returned.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data) if p.requires_grad else None
    if loss.requires_grad:
        graph = trace(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        return [p.grad for p in params]
    return None


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


def adam_step(params: Sequence[Tensor], grads: Sequence, state: AdamState) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay.

    Frozen parameters (``requires_grad`` false) are left untouched.  A missing
    gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise DimensionError("optimizer state, parameters and gradients differ in length")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.requires_grad:
            continue
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        data = p.data
        if state.weight_decay:
            data = data - state.lr * state.weight_decay * data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = (data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
