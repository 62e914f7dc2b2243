"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every operation that touches a tensor requiring
gradients records itself on an implicit tape (parent links plus a vjp
closure); ``backward`` walks the tape once in reverse topological order and
frees it. Forward results are checked for non-finite values unless the
check is switched off for speed.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericFault, UsageError

_GRAD_ENABLED = True
_FINITE_CHECKS = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array participating in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._vjp = None
        self._consumed = False

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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def __neg__(self):
        return neg(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _check_finite(op: str, data: np.ndarray) -> None:
    if _FINITE_CHECKS and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericFault(f"{op}: non-finite values in output")


def _node(op: str, data: np.ndarray, parents, vjp) -> Tensor:
    _check_finite(op, data)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_same_trailing(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_trailing("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_trailing("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_trailing("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _node("neg", -a.data, (a,), vjp)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise ``scale * x + shift`` with python-scalar coefficients."""
    out = x.data * scale + shift

    def vjp(g):
        return (g * scale,)

    return _node("affine", out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _node("exp", out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _node("log", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node("sigmoid", out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node("tanh", out, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    xd = x.data

    def vjp(g):
        return (g / (1.0 + np.exp(-xd)),)

    return _node("softplus", out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GeLU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _node("gelu", out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # derivative 0 at the kink, matching the left segment

    def vjp(g):
        return (g * mask,)

    return _node("relu", out, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sign = np.sign(x.data)

    def vjp(g):
        return (g * sign,)

    return _node("abs", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Reductions and shape plumbing


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    denom = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / denom, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / denom, shape).copy(),)

    return _node("mean", out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node("reshape", x.data.reshape(shape), (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node("transpose", x.data.transpose(axes), (x,), vjp)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node("concat", out, tuple(parts), vjp)


def split(x: Tensor, n: int, axis: int):
    """Split into ``n`` equal chunks along ``axis``; returns a list."""
    if x.shape[axis] % n:
        raise ConfigError(f"split: axis {axis} extent {x.shape[axis]} not divisible by {n}")
    chunks = np.split(x.data, n, axis=axis)
    outs = []
    for i, chunk in enumerate(chunks):
        def vjp(g, i=i):
            buf = np.zeros(x.shape, dtype=g.dtype)
            idx = [slice(None)] * buf.ndim
            w = x.shape[axis] // n
            idx[axis] = slice(i * w, (i + 1) * w)
            buf[tuple(idx)] = g
            return (buf,)

        outs.append(_node("split", chunk, (x,), vjp))
    return outs


def time_slice(x: Tensor, t: int) -> Tensor:
    """Select step ``t`` along axis 1, dropping the axis."""
    out = x.data[:, t]
    shape = x.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[:, t] = g
        return (buf,)

    return _node("time_slice", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Softmax, losses, dropout


def softmax(x: Tensor, axis: int = -1, bias: Tensor | None = None) -> Tensor:
    """Softmax over ``axis`` with an optional additive bias/mask term."""
    if bias is not None:
        x = add(x, bias)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node("softmax", out, (x,), vjp)


def cross_entropy(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood over the last axis."""
    ids = np.asarray(ids)
    if ids.shape != logits.shape[:-1]:
        raise ConfigError(
            f"cross_entropy: target shape {ids.shape} does not match logits {logits.shape}"
        )
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    lse = np.log(sez)[..., 0]
    picked = np.take_along_axis(z, ids[..., None], axis=-1)[..., 0]
    out = lse - picked
    k = ld.shape[-1]

    def vjp(g):
        p = ez / sez
        flat = p.reshape(-1, k)
        flat[np.arange(flat.shape[0]), ids.reshape(-1)] -= 1.0
        return (p * g[..., None],)

    return _node("cross_entropy", out, (logits,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity (same tensor) when not training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def vjp(g):
        return (g * keep * scale,)

    return _node("dropout", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Normalization, embedding, convolution


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis with a learned scale (no shift)."""
    if scale.shape != (x.shape[-1],):
        raise ConfigError(f"rms_norm: scale shape {scale.shape} does not match width {x.shape[-1]}")
    xd, sd = x.data, scale.data
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = xd * r * sd
    width = x.shape[-1]

    def vjp(g):
        gs = (g * xd * r).reshape(-1, width).sum(axis=0)
        gxd = g * sd
        dot = (gxd * xd).sum(axis=-1, keepdims=True)
        gx = r * gxd - (r ** 3 / width) * xd * dot
        return gx, gs

    return _node("rms_norm", out, (x, scale), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(
            f"embedding: ids outside [0, {table.shape[0]}) for table shape {table.shape}"
        )
    out = table.data[ids]
    v = table.shape[0]

    def vjp(g):
        gflat = g.reshape(-1, table.shape[-1])
        flat_ids = ids.reshape(-1)
        if v <= 256:
            # scatter-add via a one-hot matmul, far faster than np.add.at
            hot = np.zeros((v, flat_ids.size), dtype=g.dtype)
            hot[flat_ids, np.arange(flat_ids.size)] = 1.0
            return (hot @ gflat,)
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, flat_ids, gflat)
        return (gt,)

    return _node("embedding", out, (table,), vjp)


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    causal: bool = False,
) -> Tensor:
    """1-D convolution over (batch, time, channels) input.

    Weight layout is (ksize, c_in, c_out). Causal mode pads left only, so the
    output at step t depends on inputs at steps <= t; otherwise 'same'
    padding is used. Output length is ceil(T / stride) for ksize 3.
    """
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ConfigError(f"conv1d: input channels {x.shape[-1]} do not match weight {w.shape}")
    pad_l = k - 1 if causal else (k - 1) // 2
    pad_r = 0 if causal else k // 2
    xd = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)))
    t_out = (xd.shape[1] - k) // stride + 1
    out = np.zeros((x.shape[0], t_out, c_out), dtype=x.data.dtype)
    for i in range(k):
        out += xd[:, i : i + stride * t_out : stride] @ w.data[i]
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)
    wd = w.data
    t_in = x.shape[1]

    def vjp(g):
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xd)
        for i in range(k):
            sl = xd[:, i : i + stride * t_out : stride]
            gw[i] = sl.reshape(-1, c_in).T @ g.reshape(-1, c_out)
            gxp[:, i : i + stride * t_out : stride] += g @ wd[i].T
        gx = gxp[:, pad_l : pad_l + t_in]
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c_out).sum(axis=0)

    return _node("conv1d", out, parents, vjp)


def upsample_zeros(x: Tensor, factor: int) -> Tensor:
    """Insert ``factor - 1`` zeros after each step along the time axis."""
    b, t, c = x.shape
    out = np.zeros((b, t * factor, c), dtype=x.data.dtype)
    out[:, ::factor] = x.data

    def vjp(g):
        return (g[:, ::factor].copy(),)

    return _node("upsample_zeros", out, (x,), vjp)


def conv1d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 1-D convolution: zero-stuff by ``stride`` then convolve."""
    return conv1d(upsample_zeros(x, stride), w, bias=bias, stride=1, causal=False)


# ---------------------------------------------------------------------------
# Bias-table gathers (static and differentiable index paths)


def bias_gather(values: Tensor, idx: np.ndarray) -> Tensor:
    """Per-head row gather: values (H, R), idx (...) -> (H, *idx.shape)."""
    idx = np.asarray(idx)
    out = values.data[:, idx]
    h, r = values.shape

    def vjp(g):
        flat_idx = idx.reshape(-1)
        gflat = g.reshape(h, -1)
        offs = (np.arange(h)[:, None] * r + flat_idx[None, :]).reshape(-1)
        gv = np.bincount(offs, weights=gflat.reshape(-1), minlength=h * r)
        return (gv.reshape(h, r).astype(g.dtype, copy=False),)

    return _node("bias_gather", out, (values,), vjp)


def interp_rows(values: Tensor, i0: np.ndarray, i1: np.ndarray, frac: np.ndarray) -> Tensor:
    """Static linear interpolation between table columns i0 and i1.

    Used for integer relative distances where the interpolation weights are
    constants; gradients flow to the table only.
    """
    frac = frac.astype(values.dtype, copy=False)
    out = values.data[:, i0] * (1.0 - frac) + values.data[:, i1] * frac
    h, r = values.shape

    def vjp(g):
        gflat = g.reshape(h, -1)
        f = frac.reshape(-1)
        rows = np.arange(h)[:, None] * r
        offs0 = (rows + i0.reshape(-1)[None, :]).reshape(-1)
        offs1 = (rows + i1.reshape(-1)[None, :]).reshape(-1)
        gv = np.bincount(offs0, weights=(gflat * (1.0 - f)).reshape(-1), minlength=h * r)
        gv += np.bincount(offs1, weights=(gflat * f).reshape(-1), minlength=h * r)
        return (gv.reshape(h, r).astype(g.dtype, copy=False),)

    return _node("interp_rows", out, (values,), vjp)


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``, backward identity into ``x`` (quantizer surrogate)."""
    if values.shape != x.shape:
        raise ConfigError(f"straight_through: value shape {values.shape} != input {x.shape}")

    def vjp(g):
        return (g,)

    return _node("straight_through", np.asarray(values), (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Returns a dict mapping each leaf tensor with requires_grad to its
    gradient array; the same arrays are stored on ``tensor.grad``. The
    traversed graph is consumed and cannot be swept twice.
    """
    if loss._consumed:
        raise UsageError("backward: graph already consumed by a previous call")
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed and node._vjp is None and node is not loss:
            raise UsageError("backward: encountered a node consumed by a previous backward")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node] = g
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg
            elif id(p) in owned:
                np.add(acc, pg, out=acc)
            else:
                grads[id(p)] = acc + pg
                owned.add(id(p))
        node._vjp = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True
    return leaves


# ---------------------------------------------------------------------------
# Initialization


def init_truncated_normal(shape, scale: float, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Normal(0, scale) samples redrawn until they land within 2 scales."""
    if scale <= 0:
        raise ConfigError(f"init_truncated_normal: scale must be positive, got {scale}")
    draws = rng.standard_normal(shape)
    bad = np.abs(draws) > 2.0
    while bad.any():
        draws[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(draws) > 2.0
    return Tensor((draws * scale).astype(dtype))
