"""Multi-head attention variants: biased self-attention, relative and
location-based cross-attention.

Self-attention measures relative distance as key position minus query
position, so causal layers only ever see non-positive distances and use
negative-only bias tables. Cross-attention measures distance as alignment
position minus encoder position.
"""

from __future__ import annotations

import numpy as np

from .bias import BiasTable, bucket_index_op, irpb_op, table_bias
from .errors import ConfigError, NumericFault, UsageError
from .layers import Dense, Module, RunCtx
from .tensor import (
    Tensor,
    absolute,
    affine,
    matmul,
    relu,
    reshape,
    softmax,
    sub,
    transpose,
)

MASK_VALUE = -1e30  # large finite negative so masked scores underflow to 0 in softmax

_dist_cache: dict[tuple, np.ndarray] = {}


def rel_distances(t_q: int, t_k: int) -> np.ndarray:
    """Key-minus-query distance matrix (t_q, t_k)."""
    key = (t_q, t_k)
    if key not in _dist_cache:
        _dist_cache[key] = np.arange(t_k)[None, :] - np.arange(t_q)[:, None]
    return _dist_cache[key]


def causal_mask(t: int, dtype) -> np.ndarray:
    key = ("causal", t, np.dtype(dtype).str)
    if key not in _dist_cache:
        m = np.where(rel_distances(t, t) > 0, MASK_VALUE, 0.0).astype(dtype)
        _dist_cache[key] = m
    return _dist_cache[key]


def key_mask_bias(lengths: np.ndarray | None, t_k: int, dtype) -> np.ndarray | None:
    """Additive (B, 1, 1, t_k) mask hiding padded key positions."""
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    mask = np.where(np.arange(t_k)[None, :] < lengths[:, None], 0.0, MASK_VALUE).astype(dtype)
    return mask[:, None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, w = x.shape
    return transpose(reshape(x, (b, t, heads, w // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, l = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * l))


class AttentionCore(Module):
    """Shared q/k/v/output projections (no bias terms, T5 convention)."""

    def __init__(self, q_width: int, kv_width: int, width: int, heads: int, rng, dtype):
        super().__init__()
        if width % heads:
            raise ConfigError(f"attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.wq = self.child("wq", Dense(q_width, width, rng, dtype))
        self.wk = self.child("wk", Dense(kv_width, width, rng, dtype))
        self.wv = self.child("wv", Dense(kv_width, width, rng, dtype))
        self.wo = self.child("wo", Dense(width, width, rng, dtype))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, score_bias: Tensor | np.ndarray | None,
                return_weights: bool = False):
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = affine(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
        if score_bias is not None:
            bias = score_bias if isinstance(score_bias, Tensor) else Tensor(score_bias)
            weights = softmax(scores, axis=-1, bias=bias)
        else:
            weights = softmax(scores, axis=-1)
        out = self.wo(_merge_heads(matmul(weights, v)))
        if return_weights:
            return out, weights
        return out


class SelfAttention(AttentionCore):
    """Biased self-attention, causal or non-causal, RPB or IRPB mode."""

    def __init__(self, width: int, heads: int, table: BiasTable, rng, dtype,
                 causal: bool = False, interpolated: bool = True):
        super().__init__(width, width, width, heads, rng, dtype)
        if causal != table.cfg.negative_only:
            raise ConfigError("table sidedness must match attention causality")
        self.table = table
        self.param("bias", table.values)
        self.causal = causal
        self.interpolated = interpolated

    def __call__(self, x: Tensor, ctx: RunCtx, key_lengths: np.ndarray | None = None,
                 return_weights: bool = False):
        b, t, _ = x.shape
        if t == 0:
            raise UsageError("self-attention: zero-length sequence")
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        dists = rel_distances(t, t)
        if self.causal:
            dists = np.minimum(dists, 0)  # masked positive side never reaches the table
        bias = table_bias(self.table, dists, self.interpolated)  # (H, t, t)
        bias = reshape(bias, (1, self.heads, t, t))
        extra = np.zeros((), dtype=x.dtype)
        if self.causal:
            extra = extra + causal_mask(t, x.dtype)
        km = key_mask_bias(key_lengths, t, x.dtype)
        if km is not None:
            extra = extra + km
        if np.ndim(extra):
            bias = bias + Tensor(np.asarray(extra, dtype=x.dtype))
        return self._attend(q, k, v, bias, return_weights)


class StandardCrossAttention(AttentionCore):
    """Content-only cross-attention with no position bias."""

    def __init__(self, q_width: int, kv_width: int, width: int, heads: int, rng, dtype):
        super().__init__(q_width, kv_width, width, heads, rng, dtype)

    def prepare(self, enc_out: Tensor):
        k = _split_heads(self.wk(enc_out), self.heads)
        v = _split_heads(self.wv(enc_out), self.heads)
        return k, v

    def __call__(self, x: Tensor, enc_kv, ctx: RunCtx, key_lengths: np.ndarray | None = None,
                 return_weights: bool = False):
        k, v = enc_kv
        if k.shape[2] == 0:
            raise UsageError("cross-attention: empty encoder output")
        q = _split_heads(self.wq(x), self.heads)
        km = key_mask_bias(key_lengths, k.shape[2], x.dtype)
        bias = None if km is None else Tensor(km)
        return self._attend(q, k, v, bias, return_weights)


def position_bias(table: BiasTable, p: Tensor, enc_len: int, heads_first: bool = True) -> Tensor:
    """Interpolated, penalty-adjusted bias for alignment positions.

    ``p`` has shape (..., 1) broadcast against encoder positions; the result
    has shape (batch..., heads, ..., enc_len) ready to add to scores.
    Gradients flow to both the table and ``p``.
    """
    if not np.isfinite(p.data).all():
        raise NumericFault("position bias: non-finite alignment positions")
    j = Tensor(np.arange(enc_len, dtype=p.dtype))
    d = sub(p, j)  # (..., enc_len)
    eta = bucket_index_op(d, table.cfg)
    bias = irpb_op(table.values, eta, table.cfg)  # (H, ..., enc_len)
    ndim = bias.ndim
    bias = transpose(bias, (1, 0) + tuple(range(2, ndim)))  # batch first, heads second
    if table.mdp > 0:
        pen = affine(relu(affine(absolute(d), 1.0, -float(table.cfg.max_distance))), table.mdp)
        shape = (pen.shape[0], 1) + pen.shape[1:]
        bias = sub(bias, reshape(pen, shape))
    return bias


class RelativeCrossAttention(AttentionCore):
    """Dot-product cross-attention plus alignment-informed interpolated biases."""

    def __init__(self, q_width: int, kv_width: int, width: int, heads: int,
                 table: BiasTable, rng, dtype):
        super().__init__(q_width, kv_width, width, heads, rng, dtype)
        if table.cfg.negative_only:
            raise ConfigError("relative cross-attention needs a symmetric bias table")
        self.table = table
        self.param("bias", table.values)

    def prepare(self, enc_out: Tensor):
        k = _split_heads(self.wk(enc_out), self.heads)
        v = _split_heads(self.wv(enc_out), self.heads)
        return k, v

    def __call__(self, x: Tensor, enc_kv, p: Tensor, ctx: RunCtx,
                 key_lengths: np.ndarray | None = None, return_weights: bool = False):
        k, v = enc_kv
        s = k.shape[2]
        if s == 0:
            raise UsageError("cross-attention: empty encoder output")
        b, t, _ = x.shape
        q = _split_heads(self.wq(x), self.heads)
        p3 = reshape(p, (b, t, 1))
        bias = position_bias(self.table, p3, s)  # (B, H, T, S)
        km = key_mask_bias(key_lengths, s, x.dtype)
        if km is not None:
            bias = bias + Tensor(km)
        return self._attend(q, k, v, bias, return_weights)


class LocationAttention(Module):
    """Purely location-based attention: scores are biases alone (no q/k).

    Runs one decoder step at a time inside the alignment layer; values are
    projected from the encoder output once per sequence.
    """

    def __init__(self, enc_width: int, out_width: int, heads: int, table: BiasTable, rng, dtype):
        super().__init__()
        if out_width % heads:
            raise ConfigError(f"location attention width {out_width} not divisible by {heads} heads")
        if table.cfg.negative_only:
            raise ConfigError("location attention needs a symmetric bias table")
        if table.heads != heads:
            raise ConfigError(f"table has {table.heads} heads, attention expects {heads}")
        self.heads = heads
        self.head_dim = out_width // heads
        self.out_width = out_width
        self.table = table
        self.param("bias", table.values)
        self.wv = self.child("wv", Dense(enc_width, out_width, rng, dtype))
        self.wo = self.child("wo", Dense(out_width, out_width, rng, dtype))

    def prepare(self, enc_out: Tensor) -> Tensor:
        return _split_heads(self.wv(enc_out), self.heads)  # (B, H, S, L)

    def step(self, p: Tensor, values: Tensor, key_lengths: np.ndarray | None = None,
             return_weights: bool = False):
        """Context vector for one decoder step at alignment position ``p`` (B, 1)."""
        b, h, s, l = values.shape
        scores = position_bias(self.table, p, s)  # (B, H, S)
        km = key_mask_bias(key_lengths, s, scores.dtype)
        if km is not None:
            scores = scores + Tensor(km[:, :, 0, :])
        weights = softmax(scores, axis=-1)
        ctx_heads = matmul(reshape(weights, (b, h, 1, s)), values)  # (B, H, 1, L)
        out = self.wo(reshape(transpose(ctx_heads, (0, 2, 1, 3)), (b, h * l)))
        if return_weights:
            return out, weights
        return out
