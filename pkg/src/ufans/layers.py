"""Frame-axis building blocks: convolutions, pooling, gating, dropout, dense.

Sequence tensors are laid out ``(..., channels, frames)``; an optional leading
batch axis is carried through every op. Dense layers work on
``(..., frames, dims)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    custom_op,
    matmul,
    mul,
    parameter,
    sigmoid,
    tanh,
)

CHANNEL_AXIS = -2


@dataclass
class Conv1dParams:
    kernel: Tensor  # (out_ch, in_ch, kw)
    bias: Tensor  # (out_ch,)

    @property
    def kw(self) -> int:
        return self.kernel.shape[2]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]


@dataclass
class ConvTranspose1dParams:
    kernel: Tensor  # (in_ch, out_ch, 2)
    bias: Tensor  # (out_ch,)

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[1]


@dataclass
class DenseParams:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.2
    seed: int = 0
    mode: str = "eval"

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv1d(rng, in_ch: int, out_ch: int, kw: int, dtype=np.float32, name: str = "conv", gain: float = 1.0) -> Conv1dParams:
    k = glorot_uniform(rng, (out_ch, in_ch, kw), in_ch * kw, out_ch * kw, dtype, gain)
    return Conv1dParams(parameter(k, f"{name}.kernel"), parameter(np.zeros(out_ch, dtype), f"{name}.bias"))


def init_conv_transpose1d(rng, in_ch: int, out_ch: int, dtype=np.float32, name: str = "up", gain: float = 1.0) -> ConvTranspose1dParams:
    k = glorot_uniform(rng, (in_ch, out_ch, 2), in_ch * 2, out_ch * 2, dtype, gain)
    return ConvTranspose1dParams(parameter(k, f"{name}.kernel"), parameter(np.zeros(out_ch, dtype), f"{name}.bias"))


def init_dense(rng, n_in: int, n_out: int, dtype=np.float32, name: str = "dense") -> DenseParams:
    w = glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
    return DenseParams(parameter(w, f"{name}.weight"), parameter(np.zeros(n_out, dtype), f"{name}.bias"))


def _channels(x: Tensor) -> int:
    if x.ndim < 2:
        raise ShapeError(f"expected (..., channels, frames), got shape {x.shape}")
    return x.shape[CHANNEL_AXIS]


def conv1d(x: Tensor, p: Conv1dParams) -> Tensor:
    """Stride-1 convolution with zero "same" padding along frames.

    Implemented as im2col + one matmul, so each output frame is an
    independent row of the product.
    """
    if _channels(x) != p.in_ch:
        raise ShapeError(f"conv1d: input has {_channels(x)} channels, kernel expects {p.in_ch}")
    kw = p.kw
    if kw % 2 == 0:
        raise ShapeError(f"conv1d: kernel width must be odd for same padding, got {kw}")
    half = (kw - 1) // 2
    lead = x.shape[:-2]
    c_in, n = x.shape[-2:]
    xb = x.data.reshape((-1, c_in, n))
    b = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (half, half)))
    win = np.lib.stride_tricks.sliding_window_view(xp, kw, axis=-1)  # (b, c_in, n, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * n, c_in * kw)
    wmat = p.kernel.data.reshape(p.out_ch, c_in * kw)
    out = cols @ wmat.T + p.bias.data
    out = np.ascontiguousarray(out.reshape(b, n, p.out_ch).transpose(0, 2, 1)).reshape(lead + (p.out_ch, n))

    def back(g):
        g2 = np.ascontiguousarray(np.swapaxes(g.reshape(b, p.out_ch, n), 1, 2)).reshape(b * n, p.out_ch)
        gw = (g2.T @ cols).reshape(p.kernel.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(b, n, c_in, kw)
        gxp = np.zeros_like(xp)
        for j in range(kw):
            gxp[:, :, j:j + n] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, half:half + n].reshape(x.shape)
        return gx, gw, gb

    return custom_op("conv1d", (x, p.kernel, p.bias), out, back)


def conv1d_stride2(y: Tensor, kernel: Tensor) -> Tensor:
    """Width-2, stride-2 convolution without padding or bias.

    This is the adjoint of :func:`conv_transpose1d` for the same kernel; it
    exists so the pairing can be checked.
    """
    c_out, n2 = y.shape[-2:]
    if kernel.shape[1] != c_out or n2 % 2:
        raise ShapeError(f"conv1d_stride2: bad shapes {y.shape} for kernel {kernel.shape}")
    lead = y.shape[:-2]
    yb = y.data.reshape((-1, c_out, n2 // 2, 2))
    out = np.einsum("bolj,coj->bcl", yb, kernel.data).reshape(lead + (kernel.shape[0], n2 // 2))

    def back(g):
        gb = g.reshape((-1, kernel.shape[0], n2 // 2))
        gy = np.einsum("bcl,coj->bolj", gb, kernel.data).reshape(y.shape)
        gk = np.einsum("bcl,bolj->coj", gb, yb)
        return gy, gk

    return custom_op("conv1d_stride2", (y, kernel), out, back)


def conv_transpose1d(x: Tensor, p: ConvTranspose1dParams) -> Tensor:
    """Stride-2, width-2 transposed convolution; output is exactly twice as long.

    Output frame ``2l + j`` is ``kernel[:, :, j]`` applied to input frame ``l``.
    """
    if _channels(x) != p.in_ch:
        raise ShapeError(f"conv_transpose1d: input has {_channels(x)} channels, kernel expects {p.in_ch}")
    lead = x.shape[:-2]
    c_in, n = x.shape[-2:]
    xb = x.data.reshape((-1, c_in, n))
    b = xb.shape[0]
    rows = np.ascontiguousarray(xb.transpose(0, 2, 1)).reshape(b * n, c_in)
    kmat = p.kernel.data.reshape(c_in, p.out_ch * 2)
    y = (rows @ kmat).reshape(b, n, p.out_ch, 2)
    out = np.ascontiguousarray(y.transpose(0, 2, 1, 3)).reshape(b, p.out_ch, 2 * n)
    out = (out + p.bias.data[:, None]).reshape(lead + (p.out_ch, 2 * n))

    def back(g):
        g4 = g.reshape(b, p.out_ch, n, 2)
        gb = g4.sum(axis=(0, 2, 3))
        gy = np.ascontiguousarray(g4.transpose(0, 2, 1, 3)).reshape(b * n, p.out_ch * 2)
        gk = (rows.T @ gy).reshape(p.kernel.shape)
        gx = (gy @ kmat.T).reshape(b, n, c_in).transpose(0, 2, 1).reshape(x.shape)
        return gx, gk, gb

    return custom_op("conv_transpose1d", (x, p.kernel, p.bias), out, back)


def avg_pool1d(x: Tensor) -> Tensor:
    """Non-overlapping window-2 mean along frames."""
    n = x.shape[-1]
    if n % 2:
        raise ShapeError(f"avg_pool1d: frame count must be even, got {n}")
    half = x.data.dtype.type(0.5)
    out = (x.data[..., 0::2] + x.data[..., 1::2]) * half

    def back(g):
        return (np.repeat(g * half, 2, axis=-1),)

    return custom_op("avg_pool1d", (x,), out, back)


def split_channels(x: Tensor) -> tuple[Tensor, Tensor]:
    c = _channels(x)
    if c % 2:
        raise ShapeError(f"split_channels: channel count must be even, got {c}")
    h = c // 2
    first = x.data[..., :h, :]
    second = x.data[..., h:, :]

    def back_first(g):
        full = np.zeros_like(x.data)
        full[..., :h, :] = g
        return (full,)

    def back_second(g):
        full = np.zeros_like(x.data)
        full[..., h:, :] = g
        return (full,)

    return (
        custom_op("split", (x,), np.ascontiguousarray(first), back_first),
        custom_op("split", (x,), np.ascontiguousarray(second), back_second),
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    h = _channels(a)
    out = np.concatenate([a.data, b.data], axis=CHANNEL_AXIS)
    return custom_op("concat", (a, b), out, lambda g: (g[..., :h, :], g[..., h:, :]))


def gated_activation(p1: Tensor, p2: Tensor, h_bias: Tensor | None = None, g_bias: Tensor | None = None) -> Tensor:
    """``tanh(p1 + h) * sigmoid(p2 + g)`` with optional per-channel biases."""
    if p1.shape != p2.shape:
        raise ShapeError(f"gated_activation: halves differ in shape, {p1.shape} vs {p2.shape}")
    if h_bias is not None:
        p1 = add(p1, h_bias, axis=CHANNEL_AXIS)
    if g_bias is not None:
        p2 = add(p2, g_bias, axis=CHANNEL_AXIS)
    return mul(tanh(p1), sigmoid(p2))


def dropout(x: Tensor, spec: DropoutSpec) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if spec.mode == "eval" or spec.rate == 0:
        return x
    rng = np.random.default_rng(spec.seed)
    keep = rng.random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - spec.rate))
    return custom_op("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """Per-frame affine map on ``(..., frames, dims)``."""
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f"dense: input dims {x.shape[-1]} != weight rows {p.weight.shape[0]}")
    return add(matmul(x, p.weight), p.bias, axis=-1)
