"""Parameter containers and the building-block layers shared by all models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    concat,
    conv1d,
    conv1d_transpose,
    dropout,
    embedding,
    gelu,
    init_truncated_normal,
    matmul,
    mul,
    rms_norm,
    sigmoid,
    split,
    tanh,
)


@dataclass
class RunCtx:
    """Per-call execution context: dropout state and training flag."""

    training: bool = False
    dropout_rate: float = 0.0
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout_rate <= 0.0:
            return x
        return dropout(x, self.dropout_rate, self.rng, True)


EVAL_CTX = RunCtx()


class Module:
    """Minimal parameter registry with recursive named access."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, p in self._params.items():
            out[f"{prefix}{k}"] = p
        for k, c in self._children.items():
            out.update(c.named_params(f"{prefix}{k}."))
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_params(prefix)
        missing = [k for k in params if k not in arrays]
        if missing:
            raise ConfigError(f"load_state: missing arrays for {missing[:5]}")
        for k, p in params.items():
            if tuple(arrays[k].shape) != p.shape:
                raise ConfigError(f"load_state: shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = arrays[k].astype(p.data.dtype, copy=True)

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


class Dense(Module):
    """Linear layer; the bias is optional and kernels may start at zero."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        use_bias: bool = False,
        bias_init: float = 0.0,
        zero_kernel: bool = False,
    ):
        super().__init__()
        if zero_kernel:
            w = Tensor(np.zeros((d_in, d_out), dtype=dtype))
        else:
            w = init_truncated_normal((d_in, d_out), 1.0 / np.sqrt(d_in), rng, dtype=dtype)
        self.w = self.param("w", w)
        self.b = None
        if use_bias:
            self.b = self.param("b", Tensor(np.full(d_out, bias_init, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = add(y, self.b)
        return y


class RMSNorm(Module):
    def __init__(self, width: int, dtype=np.float64):
        super().__init__()
        self.scale = self.param("scale", Tensor(np.ones(width, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.scale)


class EmbeddingTable(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, dtype=np.float64, scale: float = 1.0):
        super().__init__()
        self.table = self.param("table", init_truncated_normal((count, width), scale, rng, dtype=dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.table, ids)


class Conv1d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        ksize: int = 3,
        stride: int = 1,
        causal: bool = False,
        transposed: bool = False,
    ):
        super().__init__()
        self.stride = stride
        self.causal = causal
        self.transposed = transposed
        scale = 1.0 / np.sqrt(ksize * c_in)
        self.w = self.param("w", init_truncated_normal((ksize, c_in, c_out), scale, rng, dtype=dtype))
        self.b = self.param("b", Tensor(np.zeros(c_out, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv1d_transpose(x, self.w, bias=self.b, stride=self.stride)
        return conv1d(x, self.w, bias=self.b, stride=self.stride, causal=self.causal)


class FeedForward(Module):
    """Pre-norm residual feedforward: Dense(4W)+GeLU then Dense(W)."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64, inner: int | None = None):
        super().__init__()
        inner = inner or 4 * width
        self.norm = self.child("norm", RMSNorm(width, dtype))
        self.w1 = self.child("w1", Dense(width, inner, rng, dtype))
        self.w2 = self.child("w2", Dense(inner, width, rng, dtype))

    def __call__(self, x: Tensor, ctx: RunCtx) -> Tensor:
        h = self.w2(gelu(self.w1(self.norm(x))))
        return add(x, ctx.drop(h))


class ConvBlock(Module):
    """Residual conv block: Norm, Conv3+GeLU, Dense, back onto the residual."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.norm = self.child("norm", RMSNorm(width, dtype))
        self.conv = self.child("conv", Conv1d(width, width, rng, dtype))
        self.dense = self.child("dense", Dense(width, width, rng, dtype))

    def __call__(self, x: Tensor, ctx: RunCtx) -> Tensor:
        h = self.dense(gelu(self.conv(self.norm(x))))
        return add(x, ctx.drop(h))


class ConvStage(Module):
    """Resampling convolution followed by a run of conv blocks.

    Downsampling uses a strided conv, upsampling a transposed conv; both
    keep filter size 3.
    """

    def __init__(
        self,
        c_in: int,
        width: int,
        blocks: int,
        rng: np.random.Generator,
        dtype=np.float64,
        stride: int = 1,
        upsample: bool = False,
    ):
        super().__init__()
        self.resample = self.child(
            "resample",
            Conv1d(c_in, width, rng, dtype, stride=stride, transposed=upsample),
        )
        self.blocks = [self.child(f"block{i}", ConvBlock(width, rng, dtype)) for i in range(blocks)]

    def __call__(self, x: Tensor, ctx: RunCtx) -> Tensor:
        x = self.resample(x)
        for block in self.blocks:
            x = block(x, ctx)
        return x


class LSTMCell(Module):
    """Single gated recurrent cell; forget gate biased open at init."""

    def __init__(self, d_in: int, width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.width = width
        scale = 1.0 / np.sqrt(d_in + width)
        self.w = self.param("w", init_truncated_normal((d_in + width, 4 * width), scale, rng, dtype=dtype))
        b = np.zeros(4 * width, dtype=dtype)
        b[width : 2 * width] = 1.0
        self.b = self.param("b", Tensor(b))

    def init_state(self, batch: int, dtype) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.width), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = add(matmul(concat([x, h], axis=-1), self.w), self.b)
        gi, gf, gg, go = split(z, 4, axis=-1)
        c_new = add(mul(sigmoid(gf), c), mul(sigmoid(gi), tanh(gg)))
        h_new = mul(sigmoid(go), tanh(c_new))
        return h_new, c_new
