"""Alignment layer: a lightweight recurrent cell that advances a strictly
monotonic alignment position across encoder outputs.

The scan is serial over decoder steps because the position is latent and
cannot be teacher forced; everything downstream consumes the emitted
position sequence and runs in parallel. Batched examples advance in
lockstep.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import LocationAttention
from .bias import BiasTable
from .errors import NumericFault
from .layers import Dense, FeedForward, LSTMCell, Module, RMSNorm, RunCtx
from .tensor import Tensor, add, concat, reshape, softplus, time_slice


def delta_bias_for_rate(rate: float) -> float:
    """Inverse softplus: bias value whose initial delta equals ``rate``."""
    return math.log(math.expm1(rate))


class AlignmentState:
    """Recurrent cell state plus the current alignment position."""

    __slots__ = ("h", "c", "p")

    def __init__(self, h: Tensor, c: Tensor, p: Tensor):
        self.h = h
        self.c = c
        self.p = p


class AlignmentLayer(Module):
    """LSTM fed with [step input; location-attention context], emitting
    softplus-positive position deltas."""

    def __init__(
        self,
        in_width: int,
        cell_width: int,
        enc_width: int,
        loc_heads: int,
        loc_table: BiasTable,
        rng: np.random.Generator,
        dtype=np.float64,
        delta_bias: float = -1.25,
    ):
        super().__init__()
        self.cell_width = cell_width
        self.loc = self.child(
            "loc", LocationAttention(enc_width, enc_width, loc_heads, loc_table, rng, dtype)
        )
        self.cell = self.child("cell", LSTMCell(in_width + enc_width, cell_width, rng, dtype))
        # zero kernel + configured bias gives an exact, input-independent initial delta
        self.delta = self.child(
            "delta", Dense(cell_width, 1, rng, dtype, use_bias=True, bias_init=delta_bias, zero_kernel=True)
        )

    def init_state(self, batch: int, dtype) -> AlignmentState:
        h, c = self.cell.init_state(batch, dtype)
        return AlignmentState(h, c, Tensor(np.zeros((batch, 1), dtype=dtype)))

    def prepare(self, enc_out: Tensor) -> Tensor:
        return self.loc.prepare(enc_out)

    def step(
        self,
        x_t: Tensor,
        state: AlignmentState,
        loc_values: Tensor,
        key_lengths: np.ndarray | None = None,
    ) -> tuple[Tensor, AlignmentState]:
        """One decoder step: context at the previous position, then advance."""
        context = self.loc.step(state.p, loc_values, key_lengths)
        h, c = self.cell.step(concat([x_t, context], axis=-1), state.h, state.c)
        delta = softplus(self.delta(h))
        p = add(state.p, delta)
        return h, AlignmentState(h, c, p)


class AlignmentBlock(Module):
    """Pre-norm residual wrapper around the alignment layer plus feedforward."""

    def __init__(
        self,
        width: int,
        cell_width: int,
        enc_width: int,
        loc_heads: int,
        loc_table: BiasTable,
        rng: np.random.Generator,
        dtype=np.float64,
        delta_bias: float = -1.25,
        with_feedforward: bool = True,
    ):
        super().__init__()
        self.norm = self.child("norm", RMSNorm(width, dtype))
        self.layer = self.child(
            "layer",
            AlignmentLayer(width, cell_width, enc_width, loc_heads, loc_table, rng, dtype, delta_bias),
        )
        self.proj = self.child("proj", Dense(cell_width, width, rng, dtype))
        self.ff = self.child("ff", FeedForward(width, rng, dtype)) if with_feedforward else None

    def __call__(
        self,
        x: Tensor,
        enc_out: Tensor,
        ctx: RunCtx,
        key_lengths: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (block output, position sequence (B, T))."""
        b, t, _ = x.shape
        u = self.norm(x)
        loc_values = self.layer.prepare(enc_out)
        state = self.layer.init_state(b, x.dtype)
        hs = []
        ps = []
        for i in range(t):
            try:
                h, state = self.layer.step(time_slice(u, i), state, loc_values, key_lengths)
            except NumericFault as exc:
                raise NumericFault(f"alignment step {i}: {exc}") from None
            hs.append(reshape(h, (b, 1, self.layer.cell_width)))
            ps.append(state.p)
        y = add(x, ctx.drop(self.proj(concat(hs, axis=1))))
        if self.ff is not None:
            y = self.ff(y, ctx)
        return y, reshape(concat(ps, axis=1), (b, t))
