"""Encoder-decoder assembly: text encoder, T5-style and alignment-augmented
decoder variants, and the per-frame autoregressive categorical head.

The decoder models M categorical codes per output frame. Frames are
autoregressive across time; within a frame the M channels are factorized
chain-rule style by M separate feedforward networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentBlock, AlignmentState
from .attention import (
    RelativeCrossAttention,
    SelfAttention,
    StandardCrossAttention,
    key_mask_bias,
    position_bias,
    table_bias,
)
from .bias import BiasTable, BucketConfig
from .config import ModelConfig
from .errors import ConfigError, UsageError
from .layers import (
    Dense,
    EmbeddingTable,
    ConvStage,
    Conv1d,
    FeedForward,
    Module,
    RMSNorm,
    RunCtx,
    EVAL_CTX,
)
from .tensor import (
    Tensor,
    add,
    affine,
    concat,
    cross_entropy,
    gelu,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    sum_,
    transpose,
)


def _one_hot(codes: np.ndarray, k: int, dtype) -> np.ndarray:
    return np.eye(k, dtype=dtype)[codes]


class EncoderBlock(Module):
    def __init__(self, width: int, heads: int, table: BiasTable, rng, dtype, interpolated: bool):
        super().__init__()
        self.norm = self.child("norm", RMSNorm(width, dtype))
        self.attn = self.child(
            "attn", SelfAttention(width, heads, table, rng, dtype, causal=False, interpolated=interpolated)
        )
        self.ff = self.child("ff", FeedForward(width, rng, dtype))

    def __call__(self, x: Tensor, ctx: RunCtx, key_lengths=None) -> Tensor:
        x = add(x, ctx.drop(self.attn(self.norm(x), ctx, key_lengths)))
        return self.ff(x, ctx)


class Encoder(Module):
    """Token embedding, two conv stages (second downsamples), then
    non-causal transformer blocks."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        half = cfg.enc_width // 2
        self.pad_id = cfg.vocab
        self.embed = self.child("embed", EmbeddingTable(cfg.vocab + 1, half, rng, dtype))
        self.stage1 = self.child("stage1", ConvStage(half, half, cfg.enc_conv_blocks, rng, dtype, stride=1))
        self.stage2 = self.child(
            "stage2", ConvStage(half, cfg.enc_width, cfg.enc_conv_blocks, rng, dtype, stride=cfg.enc_downsample)
        )
        interpolated = cfg.variant == "vat"
        bcfg = BucketConfig(cfg.buckets_side, cfg.d_enc_self)
        self.blocks = []
        for i in range(cfg.enc_blocks):
            table = BiasTable.truncated_normal(
                cfg.enc_heads, bcfg, rng, scale=cfg.self_bias_scale,
                mdp=cfg.mdp if interpolated else 0.0, dtype=dtype,
            )
            self.blocks.append(
                self.child(f"block{i}", EncoderBlock(cfg.enc_width, cfg.enc_heads, table, rng, dtype, interpolated))
            )
        self.final_norm = self.child("final_norm", RMSNorm(cfg.enc_width, dtype))

    def __call__(self, tokens: np.ndarray, tok_lens: np.ndarray, ctx: RunCtx):
        tokens = np.asarray(tokens)
        tok_lens = np.asarray(tok_lens)
        if tokens.ndim != 2 or tokens.shape[1] == 0 or np.any(tok_lens <= 0):
            raise UsageError("encode: empty input sequence")
        if np.any(tok_lens > tokens.shape[1]):
            raise ConfigError("encode: token lengths exceed the padded width")
        h = self.stage1(self.embed(tokens), ctx)
        h = self.stage2(h, ctx)
        enc_lens = -(-tok_lens // self.cfg.enc_downsample)
        for block in self.blocks:
            h = block(h, ctx, enc_lens)
        return self.final_norm(h), enc_lens


class ARHead(Module):
    """M masked feedforward networks; channel m sees the decoder state and
    one-hot codes of channels below m."""

    def __init__(self, channels: int, codebook: int, width: int, rng, dtype):
        super().__init__()
        self.channels = channels
        self.codebook = codebook
        self.nets = []
        for m in range(channels):
            d_in = width + m * codebook
            net = (
                self.child(f"f{m}_0", Dense(d_in, width, rng, dtype)),
                self.child(f"f{m}_1", Dense(width, width, rng, dtype)),
                self.child(f"f{m}_2", Dense(width, codebook, rng, dtype, use_bias=True)),
            )
            self.nets.append(net)

    def _apply(self, m: int, x: Tensor) -> Tensor:
        l0, l1, l2 = self.nets[m]
        return l2(gelu(l1(gelu(l0(x)))))

    def logits(self, d: Tensor, codes: np.ndarray) -> list[Tensor]:
        """Teacher-forced logits for every channel (trained in parallel)."""
        codes = np.asarray(codes)
        if codes.min() < 0 or codes.max() >= self.codebook:
            raise UsageError(f"ar head: code outside [0, {self.codebook})")
        hot = _one_hot(codes, self.codebook, d.dtype)  # (..., M, K)
        hot = hot.reshape(*codes.shape[:-1], self.channels * self.codebook)
        outs = []
        for m in range(self.channels):
            x = d if m == 0 else concat([d, Tensor(hot[..., : m * self.codebook])], axis=-1)
            outs.append(self._apply(m, x))
        return outs

    def step_logits(self, d: Tensor, prev: np.ndarray, m: int) -> Tensor:
        """Logits for channel m given codes of channels < m (shape (B, m))."""
        if m == 0:
            return self._apply(0, d)
        hot = _one_hot(prev, self.codebook, d.dtype).reshape(prev.shape[0], m * self.codebook)
        return self._apply(m, concat([d, Tensor(hot)], axis=-1))


class DecoderBlock(Module):
    """Causal self-attention, cross-attention, feedforward; pre-norm residual."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        w = cfg.dec_width
        vat = cfg.variant == "vat"
        self_cfg = BucketConfig(cfg.buckets_causal, cfg.d_dec_self, negative_only=True)
        self_table = BiasTable.truncated_normal(
            cfg.dec_heads, self_cfg, rng, scale=cfg.self_bias_scale,
            mdp=cfg.mdp if vat else 0.0, dtype=dtype,
        )
        self.norm1 = self.child("norm1", RMSNorm(w, dtype))
        self.self_attn = self.child(
            "self_attn",
            SelfAttention(w, cfg.dec_heads, self_table, rng, dtype, causal=True, interpolated=vat),
        )
        self.norm2 = self.child("norm2", RMSNorm(w, dtype))
        if vat:
            cross_table = BiasTable.gaussian(
                cfg.dec_heads, BucketConfig(cfg.buckets_side, cfg.d_cross), cfg.sigma_init,
                mdp=cfg.mdp, dtype=dtype, over_distances=cfg.gaussian_over_distances,
            )
            self.cross = self.child(
                "cross", RelativeCrossAttention(w, cfg.enc_width, w, cfg.dec_heads, cross_table, rng, dtype)
            )
        else:
            self.cross = self.child(
                "cross", StandardCrossAttention(w, cfg.enc_width, w, cfg.dec_heads, rng, dtype)
            )
        self.ff = self.child("ff", FeedForward(w, rng, dtype))
        self.vat = vat
        self.last_p = None

    def __call__(self, x: Tensor, enc_kv, p, ctx: RunCtx, enc_lens) -> Tensor:
        x = add(x, ctx.drop(self.self_attn(self.norm1(x), ctx)))
        if self.vat:
            self.last_p = p
            c = self.cross(self.norm2(x), enc_kv, p, ctx, enc_lens)
        else:
            c = self.cross(self.norm2(x), enc_kv, ctx, enc_lens)
        x = add(x, ctx.drop(c))
        return self.ff(x, ctx)


@dataclass
class GenerateResult:
    """Sampled frames plus bookkeeping; truncation is flagged, never raised."""

    frames: np.ndarray  # (B, T, M) padded with EOS frames
    lengths: np.ndarray  # (B,) includes the EOS frame when present
    truncated: np.ndarray  # (B,) bool, True when max_steps hit without EOS
    positions: np.ndarray | None = None  # (B, T) alignment trajectory (vat)
    stepwise_nll: np.ndarray | None = None  # (B, T) teacher-forced mode only

    def frame_list(self) -> list[np.ndarray]:
        return [self.frames[i, : self.lengths[i]] for i in range(len(self.lengths))]

    def position_list(self) -> list[np.ndarray]:
        if self.positions is None:
            return []
        return [self.positions[i, : self.lengths[i]] for i in range(len(self.lengths))]


class Seq2Seq(Module):
    """Full encoder-decoder with either the baseline or alignment-augmented
    decoder, selected by ``cfg.variant``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.np_dtype
        self.dtype = dtype
        self.encoder = self.child("encoder", Encoder(cfg, rng, dtype))
        w = cfg.dec_width
        ew = w // cfg.channels
        self.frame_embed = [
            self.child(f"frame_embed{m}", EmbeddingTable(cfg.codebook, ew, rng, dtype))
            for m in range(cfg.channels)
        ]
        self.in_conv = self.child("in_conv", Conv1d(w, w, rng, dtype, causal=True))
        self.cond = self.child("cond", EmbeddingTable(cfg.cond_count, w, rng, dtype))
        self.align = None
        if cfg.variant == "vat":
            loc_table = BiasTable.gaussian(
                cfg.align_heads, BucketConfig(cfg.buckets_side, cfg.d_cross), cfg.sigma_init,
                mdp=cfg.mdp, dtype=dtype, over_distances=cfg.gaussian_over_distances,
            )
            self.align = self.child(
                "align",
                AlignmentBlock(
                    w, cfg.align_cell, cfg.enc_width, cfg.align_heads, loc_table, rng, dtype,
                    delta_bias=cfg.align_delta_bias, with_feedforward=cfg.align_feedforward,
                ),
            )
        self.blocks = [self.child(f"dec{i}", DecoderBlock(cfg, rng, dtype)) for i in range(cfg.dec_blocks)]
        self.final_norm = self.child("final_norm", RMSNorm(w, dtype)) if cfg.final_norm else None
        self.head = self.child("head", ARHead(cfg.channels, cfg.codebook, w, rng, dtype))

    # ------------------------------------------------------------------
    def _embed_frames(self, codes: np.ndarray) -> Tensor:
        parts = [self.frame_embed[m](codes[..., m]) for m in range(self.cfg.channels)]
        return concat(parts, axis=-1)

    def _decoder_input(self, frames: np.ndarray, cond_ids: np.ndarray) -> Tensor:
        b, t, _ = frames.shape
        prev = np.concatenate([np.zeros((b, 1, self.cfg.channels), dtype=frames.dtype), frames[:, :-1]], axis=1)
        x = self.in_conv(self._embed_frames(prev))
        return add(x, reshape(self.cond(np.asarray(cond_ids)), (b, 1, self.cfg.dec_width)))

    def decode_train(
        self,
        tokens: np.ndarray,
        tok_lens: np.ndarray,
        frames: np.ndarray,
        frame_lens: np.ndarray,
        cond_ids: np.ndarray,
        ctx: RunCtx = EVAL_CTX,
    ):
        """Teacher-forced mean NLL per (step, channel). Returns (loss, aux)."""
        frames = np.asarray(frames)
        frame_lens = np.asarray(frame_lens)
        b, t, m = frames.shape
        if m != self.cfg.channels:
            raise ConfigError(f"decode_train: got {m} channels, model has {self.cfg.channels}")
        if t > self.cfg.train_frame_cap:
            raise UsageError(
                f"decode_train: target length {t} exceeds the configured cap {self.cfg.train_frame_cap}"
            )
        enc_out, enc_lens = self.encoder(tokens, tok_lens, ctx)
        x = self._decoder_input(frames, cond_ids)
        p = None
        if self.align is not None:
            x, p = self.align(x, enc_out, ctx, enc_lens)
        for block in self.blocks:
            kv = block.cross.prepare(enc_out)
            x = block(x, kv, p, ctx, enc_lens)
        if self.final_norm is not None:
            x = self.final_norm(x)
        logits = self.head.logits(x, frames)
        total = None
        for ch, lg in enumerate(logits):
            ce = cross_entropy(lg, frames[..., ch])
            total = ce if total is None else add(total, ce)
        mask = (np.arange(t)[None, :] < frame_lens[:, None]).astype(x.dtype)
        masked = mul(total, Tensor(mask))
        # per-frame NLL (summed over channels), averaged over valid steps then batch
        per_example = mul(sum_(masked, axis=1), Tensor(1.0 / frame_lens.astype(x.dtype)))
        loss = mean(per_example)
        aux = {
            "positions": p,
            "per_step_nll": total.data * mask,
            "per_example_nll": per_example.data,
        }
        return loss, aux

    # ------------------------------------------------------------------
    def _sample_channelwise(self, d: Tensor, rng, temperature: float) -> np.ndarray:
        codes = np.zeros((d.shape[0], 0), dtype=np.int64)
        for ch in range(self.cfg.channels):
            logits = self.head.step_logits(d, codes, ch).data
            if temperature <= 0.0:
                pick = logits.argmax(axis=-1)
            else:
                probs = softmax(Tensor(logits / temperature), axis=-1).data
                cdf = probs.cumsum(axis=-1)
                u = rng.random((logits.shape[0], 1))
                pick = (cdf < u).sum(axis=-1).clip(0, self.cfg.codebook - 1)
            codes = np.concatenate([codes, pick[:, None]], axis=1)
        return codes

    def generate(
        self,
        tokens: np.ndarray,
        tok_lens: np.ndarray,
        cond_ids: np.ndarray,
        rng: np.random.Generator | None = None,
        max_steps: int = 256,
        temperature: float | None = None,
        teacher_frames: np.ndarray | None = None,
    ) -> GenerateResult:
        """Autoregressive decoding across time and channels.

        Sampling uses the configured temperature unless overridden; with
        ``teacher_frames`` the loop consumes ground-truth codes instead of
        samples and records stepwise NLL (used by equivalence tests).
        """
        cfg = self.cfg
        if max_steps < 1:
            raise UsageError("generate: max_steps must be >= 1")
        temperature = cfg.temperature if temperature is None else temperature
        if rng is None:
            rng = np.random.default_rng(0)
        with no_grad():
            return self._decode_loop(tokens, tok_lens, cond_ids, rng, max_steps, temperature, teacher_frames)

    def _decode_loop(self, tokens, tok_lens, cond_ids, rng, max_steps, temperature, teacher_frames):
        cfg = self.cfg
        w = cfg.dec_width
        heads = cfg.dec_heads
        hd = w // heads
        ctx = EVAL_CTX
        enc_out, enc_lens = self.encoder(tokens, tok_lens, ctx)
        b, s, _ = enc_out.shape
        if teacher_frames is not None:
            max_steps = teacher_frames.shape[1]
        cond_vec = self.cond(np.asarray(cond_ids))  # (B, W)
        block_kv = [blk.cross.prepare(enc_out) for blk in self.blocks]
        km_step = key_mask_bias(enc_lens, s, self.dtype)  # (B,1,1,S)
        loc_values = None
        astate: AlignmentState | None = None
        if self.align is not None:
            loc_values = self.align.layer.prepare(enc_out)
            astate = self.align.layer.init_state(b, self.dtype)

        conv_w = self.in_conv.w.data  # (3, W, W)
        conv_b = self.in_conv.b.data
        e_prev1 = np.zeros((b, w), dtype=self.dtype)
        e_prev2 = np.zeros((b, w), dtype=self.dtype)
        k_buf = [np.zeros((b, heads, max_steps, hd), dtype=self.dtype) for _ in self.blocks]
        v_buf = [np.zeros((b, heads, max_steps, hd), dtype=self.dtype) for _ in self.blocks]

        frames = np.zeros((b, max_steps, cfg.channels), dtype=np.int64)
        positions = np.zeros((b, max_steps), dtype=np.float64) if self.align is not None else None
        nll = np.zeros((b, max_steps), dtype=np.float64) if teacher_frames is not None else None
        done = np.zeros(b, dtype=bool)
        lengths = np.full(b, max_steps, dtype=np.int64)
        prev_codes = np.zeros((b, cfg.channels), dtype=np.int64)

        for t in range(max_steps):
            e_t = self._embed_frames(prev_codes).data  # (B, W)
            xt = e_prev2 @ conv_w[0] + e_prev1 @ conv_w[1] + e_t @ conv_w[2] + conv_b
            e_prev2, e_prev1 = e_prev1, e_t
            y = Tensor(xt) + cond_vec
            if self.align is not None:
                u = self.align.norm(y)
                h, astate = self.align.layer.step(u, astate, loc_values, enc_lens)
                y = y + self.align.proj(h)
                if self.align.ff is not None:
                    y = self.align.ff(y, ctx)
                positions[:, t] = astate.p.data[:, 0]
            for li, blk in enumerate(self.blocks):
                n1 = blk.self_attn.wq, blk.self_attn.wk, blk.self_attn.wv
                normed = blk.norm1(y)
                q = reshape(n1[0](normed), (b, heads, 1, hd))
                k_buf[li][:, :, t] = n1[1](normed).data.reshape(b, heads, hd)
                v_buf[li][:, :, t] = n1[2](normed).data.reshape(b, heads, hd)
                keys = Tensor(k_buf[li][:, :, : t + 1])
                vals = Tensor(v_buf[li][:, :, : t + 1])
                dists = np.arange(t + 1) - t
                sbias = table_bias(blk.self_attn.table, dists, blk.self_attn.interpolated)  # (H, t+1)
                scores = affine(matmul(q, transpose(keys, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
                weights = softmax(scores, axis=-1, bias=reshape(sbias, (1, heads, 1, t + 1)))
                sa = blk.self_attn.wo(reshape(matmul(weights, vals), (b, w)))
                y = y + sa
                cq = reshape(blk.cross.wq(blk.norm2(y)), (b, heads, 1, hd))
                kk, vv = block_kv[li]
                cscores = affine(matmul(cq, transpose(kk, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
                cbias = Tensor(km_step) if km_step is not None else None
                if blk.vat:
                    pb = position_bias(blk.cross.table, reshape(astate.p, (b, 1, 1)), s)  # (B,H,1,S)
                    cbias = pb if cbias is None else pb + cbias
                cweights = softmax(cscores, axis=-1, bias=cbias) if cbias is not None else softmax(cscores, axis=-1)
                cr = blk.cross.wo(reshape(matmul(cweights, vv), (b, w)))
                y = y + cr
                y = blk.ff(y, ctx)
            if self.final_norm is not None:
                y = self.final_norm(y)
            if teacher_frames is not None:
                codes = teacher_frames[:, t]
                step_nll = np.zeros(b, dtype=np.float64)
                for ch in range(cfg.channels):
                    logits = self.head.step_logits(y, codes[:, :ch], ch)
                    step_nll += cross_entropy(logits, codes[:, ch]).data
                nll[:, t] = step_nll
            else:
                codes = self._sample_channelwise(y, rng, temperature)
                codes[done] = 0
            frames[:, t] = codes
            newly = (~done) & (codes[:, 0] == 0)
            lengths[newly] = t + 1
            done |= newly
            prev_codes = codes.copy()
            if teacher_frames is None and done.all():
                frames = frames[:, : t + 1]
                if positions is not None:
                    positions = positions[:, : t + 1]
                break
        truncated = ~done if teacher_frames is None else np.zeros(b, dtype=bool)
        if teacher_frames is not None:
            lengths = np.full(b, max_steps, dtype=np.int64)
        return GenerateResult(frames, lengths, truncated, positions, nll)
