"""Relative position biases: bucket mapping, interpolated lookup, distance penalty.

A bias table stores one learnable value per (head, signed bucket index).
Integer relative distances index the table through the piecewise
linear/logarithmic bucket function with round-toward-zero; real-valued
distances (alignment positions) use linear interpolation between the two
adjacent buckets, which keeps the bias differentiable with respect to the
distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor, _node, bias_gather, init_truncated_normal, interp_rows


@dataclass(frozen=True)
class BucketConfig:
    """Bucket count per side, saturation distance, and sidedness."""

    buckets: int
    max_distance: int
    negative_only: bool = False

    def __post_init__(self):
        if self.buckets <= 0 or self.buckets % 2:
            raise ConfigError(f"bucket count must be a positive even integer, got {self.buckets}")
        if self.max_distance <= self.buckets // 2:
            raise ConfigError(
                f"max distance {self.max_distance} must exceed half the bucket count {self.buckets // 2}"
            )

    @property
    def lo(self) -> int:
        return -(self.buckets - 1)

    @property
    def hi(self) -> int:
        return 0 if self.negative_only else self.buckets - 1

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    def col(self, index):
        """Map a signed bucket index to a table column."""
        return index - self.lo


def bucket_index(d, cfg: BucketConfig):
    """Signed real bucket index for relative distance ``d``.

    Identity inside (-B/2, B/2), logarithmic out to the max distance, then
    saturated at +/-(B-1). Odd in d. Scalar in, scalar out.
    """
    arr = np.asarray(d, dtype=np.float64)
    if cfg.negative_only and np.any(arr > 0):
        raise UsageError("bucket_index: positive distance in a negative-only table")
    b2 = cfg.buckets / 2.0
    a = np.abs(arr)
    log_scale = (b2 - 1.0) / math.log(cfg.max_distance / b2)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_branch = b2 + np.log(np.maximum(a, 1e-300) / b2) * log_scale
    val = np.where(a < b2, a, np.where(a < cfg.max_distance, log_branch, cfg.buckets - 1.0))
    out = np.sign(arr) * val
    return float(out) if np.isscalar(d) else out


def bucket_index_grad(d, cfg: BucketConfig):
    """d(bucket_index)/dd, using the forward branch at branch boundaries."""
    arr = np.asarray(d, dtype=np.float64)
    b2 = cfg.buckets / 2.0
    a = np.abs(arr)
    log_scale = (b2 - 1.0) / math.log(cfg.max_distance / b2)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_grad = log_scale / np.maximum(a, 1e-300)
    return np.where(a < b2, 1.0, np.where(a < cfg.max_distance, log_grad, 0.0))


def rep_dist(index, cfg: BucketConfig):
    """Representative distance for a bucket index (pseudo-inverse of the map)."""
    arr = np.asarray(index, dtype=np.float64)
    if np.any(np.abs(arr) > cfg.buckets - 1):
        raise ConfigError(f"rep_dist: |index| must be <= {cfg.buckets - 1}")
    b2 = cfg.buckets / 2.0
    a = np.abs(arr)
    grown = b2 * (cfg.max_distance / b2) ** ((a - b2) / (b2 - 1.0))
    val = np.where(a < b2, a, grown)
    out = np.sign(arr) * val
    return float(out) if np.isscalar(index) else out


def _interp_terms(eta: np.ndarray):
    """Floor-toward-zero / ceil-away-from-zero indices and the linear weight."""
    i0 = np.trunc(eta)
    frac = np.abs(eta) - np.floor(np.abs(eta))
    i1 = i0 + np.sign(eta) * (frac > 0)
    return i0.astype(np.int64), i1.astype(np.int64), frac


class BiasTable:
    """Learnable relative-position biases for one attention layer."""

    def __init__(self, values: Tensor, cfg: BucketConfig, mdp: float = 0.0):
        if mdp < 0:
            raise ConfigError(f"maximum distance penalty must be >= 0, got {mdp}")
        if values.ndim != 2 or values.shape[1] != cfg.width:
            raise ConfigError(
                f"bias table shape {values.shape} does not match index range width {cfg.width}"
            )
        self.values = values
        self.cfg = cfg
        self.mdp = mdp

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def truncated_normal(
        heads: int,
        cfg: BucketConfig,
        rng: np.random.Generator,
        scale: float = 0.5,
        mdp: float = 0.0,
        dtype=np.float64,
        name: str = "bias",
    ) -> "BiasTable":
        values = init_truncated_normal((heads, cfg.width), scale, rng, dtype=dtype)
        values.requires_grad = True
        values.name = name
        return BiasTable(values, cfg, mdp=mdp)

    @staticmethod
    def gaussian(
        heads: int,
        cfg: BucketConfig,
        sigma: float,
        mdp: float = 0.0,
        dtype=np.float64,
        name: str = "bias",
        over_distances: bool = True,
    ) -> "BiasTable":
        """Log of a unit-peak Gaussian window centered at zero distance.

        The window is evaluated at each bucket's representative distance by
        default; ``over_distances=False`` evaluates it at raw bucket indices
        instead.
        """
        if sigma <= 0:
            raise ConfigError(f"gaussian init sigma must be positive, got {sigma}")
        idx = np.arange(cfg.lo, cfg.hi + 1, dtype=np.float64)
        x = rep_dist(idx, cfg) if over_distances else idx
        row = -(x * x) / (2.0 * sigma * sigma)
        values = Tensor(np.tile(row, (heads, 1)).astype(dtype), requires_grad=True, name=name)
        return BiasTable(values, cfg, mdp=mdp)


def rpb_lookup(table: BiasTable, i, j) -> np.ndarray:
    """Standard bias for integer positions: values at round-toward-zero buckets."""
    eta = bucket_index(np.asarray(i) - np.asarray(j), table.cfg)
    k = np.trunc(np.asarray(eta)).astype(np.int64)
    return table.values.data[:, table.cfg.col(k)]


def irpb(table: BiasTable, d) -> np.ndarray:
    """Interpolated bias per head for real-valued distances (no penalty)."""
    eta = np.asarray(bucket_index(d, table.cfg))
    i0, i1, frac = _interp_terms(eta)
    v = table.values.data
    c0, c1 = table.cfg.col(i0), table.cfg.col(i1)
    return v[:, c0] * (1.0 - frac) + v[:, c1] * frac


def mdp_penalty(table: BiasTable, d) -> np.ndarray:
    """Linear penalty applied beyond the max distance: P * max(|d| - D, 0)."""
    return table.mdp * np.maximum(np.abs(np.asarray(d, dtype=np.float64)) - table.cfg.max_distance, 0.0)


def apply_mdp(table: BiasTable, d, beta: np.ndarray) -> np.ndarray:
    return beta - mdp_penalty(table, d)


def irpb_md(table: BiasTable, d) -> np.ndarray:
    return apply_mdp(table, d, irpb(table, d))


# ---------------------------------------------------------------------------
# Graph-recorded paths


def table_bias(table: BiasTable, dists: np.ndarray, interpolated: bool) -> Tensor:
    """Bias tensor (heads, *dists.shape) for constant integer/real distances.

    Gradients flow to the table values only. Interpolated mode also applies
    the maximum distance penalty when configured.
    """
    eta = np.asarray(bucket_index(dists, table.cfg))
    if interpolated:
        i0, i1, frac = _interp_terms(eta)
        out = interp_rows(table.values, table.cfg.col(i0), table.cfg.col(i1), frac)
        if table.mdp > 0:
            pen = mdp_penalty(table, dists).astype(table.values.dtype)
            out = out - Tensor(pen)
        return out
    k = np.trunc(eta).astype(np.int64)
    return bias_gather(table.values, table.cfg.col(k))


def bucket_index_op(d: Tensor, cfg: BucketConfig) -> Tensor:
    """Differentiable bucket index for a distance tensor."""
    if cfg.negative_only and np.any(d.data > 0):
        raise UsageError("bucket_index: positive distance in a negative-only table")
    out = bucket_index(d.data, cfg)
    deriv = bucket_index_grad(d.data, cfg)

    def vjp(g):
        return (g * deriv,)

    return _node("bucket_index", np.asarray(out, dtype=d.dtype), (d,), vjp)


def irpb_op(values: Tensor, eta: Tensor, cfg: BucketConfig) -> Tensor:
    """Interpolated bias with gradients to both the table and the index.

    Output shape is (heads, *eta.shape). At interpolation knots (integral
    eta) the index gradient uses the left-segment slope.
    """
    i0, i1, frac = _interp_terms(eta.data)
    c0, c1 = cfg.col(i0), cfg.col(i1)
    v = values.data
    frac = frac.astype(v.dtype, copy=False)
    out = v[:, c0] * (1.0 - frac) + v[:, c1] * frac
    h, r = values.shape
    sign = np.sign(eta.data).astype(v.dtype, copy=False)

    def vjp(g):
        gflat = g.reshape(h, -1)
        f = frac.reshape(-1)
        rows = np.arange(h)[:, None] * r
        offs0 = (rows + c0.reshape(-1)[None, :]).reshape(-1)
        offs1 = (rows + c1.reshape(-1)[None, :]).reshape(-1)
        gv = np.bincount(offs0, weights=(gflat * (1.0 - f)).reshape(-1), minlength=h * r)
        gv += np.bincount(offs1, weights=(gflat * f).reshape(-1), minlength=h * r)
        slope = np.where(
            frac > 0,
            sign * (v[:, c1] - v[:, c0]),
            v[:, c0] - v[:, np.maximum(c0 - 1, 0)],
        )
        geta = (g * slope).sum(axis=0)
        return gv.reshape(h, r).astype(g.dtype, copy=False), geta

    return _node("irpb", out, (values, eta), vjp)


# ---------------------------------------------------------------------------
# Export helpers


def exp_bias_rows(table: BiasTable):
    """Exponentiated biases with rows ordered by peakedness (kurtosis).

    Returns (sorted rows, head order, signed index axis).
    """
    rows = np.exp(table.values.data.astype(np.float64))
    centered = rows - rows.mean(axis=1, keepdims=True)
    m2 = (centered**2).mean(axis=1)
    m4 = (centered**4).mean(axis=1)
    kurt = np.where(m2 > 0, m4 / np.maximum(m2 * m2, 1e-300) - 3.0, 0.0)
    order = np.argsort(-kurt, kind="stable")
    idx = np.arange(table.cfg.lo, table.cfg.hi + 1)
    return rows[order], order, idx
