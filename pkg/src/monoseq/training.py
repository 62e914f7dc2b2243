"""Training loop with periodic checkpoints, CSV loss log, and exact resume.

Batches and dropout masks are drawn from per-step seed streams derived from
(config seed, stream tag, step), so resuming from a checkpoint replays the
exact remainder of a straight-through run.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np

from . import tensor as tensor_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, experiment_from_dict, experiment_to_dict
from .errors import ConfigError, NumericFault
from .layers import RunCtx
from .model import Seq2Seq
from .optim import LrSchedule, OptimizerState, adam_step
from .tasks import ExpansionTask, gen_batch
from .tensor import backward

_BATCH_STREAM = 1
_DROPOUT_STREAM = 2
_INIT_STREAM = 0


def build_model(exp: ExperimentConfig) -> Seq2Seq:
    exp.validate()
    init_rng = np.random.default_rng([exp.train.seed, _INIT_STREAM])
    return Seq2Seq(exp.model, init_rng)


def model_from_checkpoint(path: str) -> tuple[Seq2Seq, ExperimentConfig, dict]:
    arrays, config, meta = load_checkpoint(path)
    exp = experiment_from_dict(config)
    model = build_model(exp)
    model.load_state({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return model, exp, meta


class Trainer:
    def __init__(self, exp: ExperimentConfig, out_dir: str):
        self.exp = exp.validate()
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.task = ExpansionTask(exp.task)
        self.model = build_model(exp)
        self.params = self.model.named_params()
        base = exp.train.base_lr
        if base is None:
            base = 0.01 / math.sqrt(exp.model.dec_width)
        total = exp.train.steps
        schedule = LrSchedule(base, tuple(int(f * total) for f in exp.train.lr_decay_fracs))
        self.opt = OptimizerState.for_params(self.params, schedule, clip_norm=exp.train.clip_norm)
        self.log_path = os.path.join(out_dir, "train_log.csv")
        self._log_fh = None
        self._resumed = False

    # ------------------------------------------------------------------
    def checkpoint_path(self, step: int) -> str:
        return os.path.join(self.out_dir, f"ckpt_{step:06d}.msq")

    def save(self, step: int) -> str:
        arrays = {f"param.{k}": p.data for k, p in self.params.items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.opt.v.items()})
        cfg_dict = experiment_to_dict(self.exp)
        meta = {"step": step, "config_hash": config_hash(cfg_dict)}
        path = self.checkpoint_path(step)
        save_checkpoint(path, arrays, cfg_dict, meta)
        return path

    def restore(self, path: str) -> int:
        arrays, config, meta = load_checkpoint(path)
        if config_hash(config) != config_hash(experiment_to_dict(self.exp)):
            raise ConfigError("restore: checkpoint config does not match the trainer config")
        self.model.load_state({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        for k in self.opt.m:
            self.opt.m[k] = arrays[f"adam.m.{k}"].astype(self.opt.m[k].dtype, copy=True)
            self.opt.v[k] = arrays[f"adam.v.{k}"].astype(self.opt.v[k].dtype, copy=True)
        self.opt.step = int(meta["step"])
        self._resumed = True
        return self.opt.step

    # ------------------------------------------------------------------
    def _log(self, step: int, loss: float, grad_norm: float, wall: float) -> None:
        if self._log_fh is None:
            fresh = not (self._resumed and os.path.exists(self.log_path))
            self._log_fh = open(self.log_path, "w" if fresh else "a")
            if fresh:
                self._log_fh.write("step,loss,grad_norm,wall_time\n")
        self._log_fh.write(f"{step},{loss!r},{grad_norm!r},{wall:.3f}\n")
        self._log_fh.flush()

    def train(self, steps: int | None = None, progress: bool = False) -> str:
        """Run up to the configured number of steps; returns the final checkpoint."""
        exp = self.exp
        total = exp.train.steps if steps is None else steps
        last_good = self.save(self.opt.step) if self.opt.step == 0 else self.checkpoint_path(self.opt.step)
        prev_checks = tensor_mod.finite_checks_enabled()
        tensor_mod.set_finite_checks(exp.train.finite_checks)
        try:
            while self.opt.step < total:
                step = self.opt.step  # 0-based stream index for this update
                t0 = time.time()
                tokens, tok_lens, frames, frame_lens = gen_batch(
                    self.task,
                    exp.train.batch,
                    seed=[exp.train.seed, _BATCH_STREAM, step],
                    frame_cap=exp.task.frame_cap,
                )
                ctx = RunCtx(
                    training=True,
                    dropout_rate=exp.model.dropout,
                    rng=np.random.default_rng([exp.train.seed, _DROPOUT_STREAM, step]),
                )
                cond_ids = np.zeros(len(tokens), dtype=np.int64)
                loss, _ = self.model.decode_train(tokens, tok_lens, frames, frame_lens, cond_ids, ctx)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericFault(
                        f"training aborted at step {step}: non-finite loss; "
                        f"last good checkpoint {last_good}"
                    )
                grads = backward(loss)
                by_name = {
                    k: grads[p] if p in grads else np.zeros_like(p.data)
                    for k, p in self.params.items()
                }
                norm = adam_step(self.params, by_name, self.opt)
                wall = time.time() - t0
                if self.opt.step % exp.train.log_interval == 0 or self.opt.step == total:
                    self._log(self.opt.step, loss_val, norm, wall)
                    if progress:
                        print(f"step {self.opt.step}/{total} loss {loss_val:.4f} "
                              f"gnorm {norm:.2f} {wall:.2f}s", flush=True)
                if self.opt.step % exp.train.checkpoint_interval == 0 or self.opt.step == total:
                    last_good = self.save(self.opt.step)
        finally:
            tensor_mod.set_finite_checks(prev_checks)
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        if self.opt.step == 0:
            return last_good
        final = self.checkpoint_path(self.opt.step)
        if not os.path.exists(final):
            final = self.save(self.opt.step)
        return final
