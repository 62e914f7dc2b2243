"""Synthetic monotonic expansion task.

Each vocabulary token expands deterministically into 1..4 output frames
(optionally jittered by one), giving a monotonic sequence-to-sequence
problem whose decode is exact: channel 1 and 3 carry the token identity,
channel 2 the position within the run, channel 4 a consistency hash.
Channel 1 reserves code 0 for the end-of-sequence frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TaskConfig
from .errors import ConfigError


@dataclass
class Utterance:
    tokens: np.ndarray  # (n_tokens,) int
    frames: np.ndarray  # (n_frames, M) int, ends with one EOS frame


class ExpansionTask:
    """Deterministic token-to-frames expansion with stochastic durations."""

    def __init__(self, cfg: TaskConfig):
        cfg.validate()
        if cfg.channels < 2:
            raise ConfigError("expansion task needs at least channels 1 and 2")
        self.cfg = cfg
        self.k = cfg.codebook

    def repeat_count(self, token: int) -> int:
        return 1 + (token * 7 + 3) % 4

    def channel_codes(self, token: int) -> tuple[int, ...]:
        """Per-channel identity codes (run-progress channel excluded)."""
        k = self.k
        c1 = 1 + token % (k - 1)
        rest = [(token // (k - 1)) % k]
        for extra in range(self.cfg.channels - 3):
            rest.append((token * 37 + 11 * (extra + 1)) % k)
        return (c1, *rest[: self.cfg.channels - 2])

    def token_from_codes(self, c1: int, c3: int) -> int:
        return c3 * (self.k - 1) + (c1 - 1)

    def frames_for(self, tokens: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Expand tokens into frames plus one trailing EOS frame."""
        cfg = self.cfg
        rows = []
        for tok in tokens:
            n = self.repeat_count(int(tok))
            if rng is not None and cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
                n = max(1, n + (1 if rng.random() < 0.5 else -1))
            ident = self.channel_codes(int(tok))
            for pos in range(n):
                row = [ident[0], min(pos, self.k - 1), *ident[1:]]
                rows.append(row)
        rows.append([0] * cfg.channels)
        return np.asarray(rows, dtype=np.int64)

    def sample_tokens(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """IID tokens with occasional immediate repeats of the previous one."""
        cfg = self.cfg
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            if i and cfg.repeat_prob > 0 and rng.random() < cfg.repeat_prob:
                out[i] = out[i - 1]
            else:
                out[i] = rng.integers(0, cfg.vocab)
        return out

    def sample_utterance(
        self,
        rng: np.random.Generator,
        n_tokens: int | None = None,
        frame_cap: int | None = None,
        target_frames: int | None = None,
    ) -> Utterance:
        """One (tokens, frames) pair.

        ``frame_cap`` truncates trailing tokens so the target fits (training
        regime); ``target_frames`` instead grows the utterance until the
        frame budget is reached (evaluation regime, unbounded length).
        """
        cfg = self.cfg
        if target_frames is not None:
            toks: list[int] = []
            total = 0
            while total < target_frames:
                if toks and cfg.repeat_prob > 0 and rng.random() < cfg.repeat_prob:
                    nxt = toks[-1]
                else:
                    nxt = int(rng.integers(0, cfg.vocab))
                toks.append(nxt)
                total += self.repeat_count(nxt)
            tokens = np.asarray(toks, dtype=np.int64)
            return Utterance(tokens, self.frames_for(tokens, rng))
        if n_tokens is None:
            n_tokens = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        tokens = self.sample_tokens(n_tokens, rng)
        frames = self.frames_for(tokens, rng)
        cap = frame_cap if frame_cap is not None else cfg.frame_cap
        while len(frames) > cap and len(tokens) > 1:
            # drop whole trailing tokens until the target fits the cap
            drop = max(1, (len(frames) - cap) // 5)
            tokens = tokens[:-drop]
            frames = self.frames_for(tokens, rng)
        return Utterance(tokens, frames)

    def decode_frames(self, frames: np.ndarray) -> tuple[list[int], bool]:
        """Run-collapse frames back to tokens; returns (tokens, saw_eos)."""
        tokens: list[int] = []
        prev_key = None
        saw_eos = False
        for row in np.asarray(frames):
            c1 = int(row[0])
            if c1 == 0:
                saw_eos = True
                break
            c3 = int(row[2]) if self.cfg.channels >= 3 else 0
            progress = int(row[1])
            key = (c1, c3)
            if prev_key is None or key != prev_key or progress == 0:
                tokens.append(self.token_from_codes(c1, c3))
            prev_key = key
        return tokens, saw_eos


def pad_batch(utterances: list[Utterance], pad_token: int):
    """Stack variable-length utterances into padded arrays with lengths."""
    b = len(utterances)
    s = max(len(u.tokens) for u in utterances)
    t = max(len(u.frames) for u in utterances)
    m = utterances[0].frames.shape[1]
    tokens = np.full((b, s), pad_token, dtype=np.int64)
    frames = np.zeros((b, t, m), dtype=np.int64)
    tok_lens = np.zeros(b, dtype=np.int64)
    frame_lens = np.zeros(b, dtype=np.int64)
    for i, u in enumerate(utterances):
        tokens[i, : len(u.tokens)] = u.tokens
        frames[i, : len(u.frames)] = u.frames
        tok_lens[i] = len(u.tokens)
        frame_lens[i] = len(u.frames)
    return tokens, tok_lens, frames, frame_lens


def gen_batch(task: ExpansionTask, batch: int, seed, length_range: tuple[int, int] | None = None,
              frame_cap: int | None = None):
    """Deterministic training batch keyed by seed; returns padded arrays."""
    rng = np.random.default_rng(seed)
    lo, hi = length_range if length_range else (task.cfg.min_tokens, task.cfg.max_tokens)
    utts = [
        task.sample_utterance(rng, n_tokens=int(rng.integers(lo, hi + 1)), frame_cap=frame_cap)
        for _ in range(batch)
    ]
    return pad_batch(utts, pad_token=task.cfg.vocab)


# Repeated-token stress templates: a marked token repeated r times between
# distinct flankers, mirroring three fixed phrase shapes.
STRESS_TEMPLATES = (
    {"name": "tired", "prefix": (2, 7, 11), "mark": 19, "suffix": (23, 31)},
    {"name": "number", "prefix": (5,), "mark": 29, "suffix": (13, 37, 41)},
    {"name": "wow", "prefix": (3, 17), "mark": 43, "suffix": (8,)},
)


def stress_case(template: dict, repeats: int) -> np.ndarray:
    if not 1 <= repeats <= 9:
        raise ConfigError(f"stress repeats must be 1..9, got {repeats}")
    return np.asarray(
        list(template["prefix"]) + [template["mark"]] * repeats + list(template["suffix"]),
        dtype=np.int64,
    )
