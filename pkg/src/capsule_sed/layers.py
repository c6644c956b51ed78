"""Gated convolutions, batch normalization, dropout and dense layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class GatedConvSpec:
    filters_linear: int = 64
    filters_gate: int = 64
    kernel_width: int = 3
    stride: int = 1
    layers_per_block: int = 2
    blocks: int = 3

    def __post_init__(self):
        if self.filters_linear != self.filters_gate:
            raise ValueError("gated convolution needs as many gate filters as linear filters")
        if self.kernel_width % 2 == 0:
            raise ValueError("kernel_width must be odd for same padding")
        if min(self.filters_linear, self.layers_per_block, self.blocks, self.stride) < 1:
            raise ValueError("gated conv sizes must be positive")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (trainable scale/shift live in the params dict)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-3

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-3, dtype=np.float32):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(rng, c_in: int, c_out: int, kh: int, kw: int, dtype=np.float32):
    kernel = glorot_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw, dtype)
    return kernel, np.zeros(c_out, dtype)


def init_gated_conv(rng, c_in: int, spec: GatedConvSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    k = spec.kernel_width
    lin_k, lin_b = init_conv(rng, c_in, spec.filters_linear, k, k, dtype)
    gate_k, gate_b = init_conv(rng, c_in, spec.filters_gate, k, k, dtype)
    return {"linear.kernel": lin_k, "linear.bias": lin_b, "gate.kernel": gate_k, "gate.bias": gate_b}


def gated_conv(x: Tensor, params, prefix: str = "", stride: int = 1) -> Tensor:
    """Linear convolution multiplied elementwise by a sigmoid-gated convolution."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"gated_conv expects a channel dimension, got shape {x.shape}")
    linear = T.conv2d(x, params[prefix + "linear.kernel"], params[prefix + "linear.bias"], stride=stride)
    gate = T.conv2d(x, params[prefix + "gate.kernel"], params[prefix + "gate.bias"], stride=stride)
    return linear * T.sigmoid(gate)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over every axis except the channel axis (axis -3)."""
    x = T.as_tensor(x)
    channel_axis = x.ndim - 3
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = x.shape[channel_axis]
    if training:
        mu = T.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=axes, keepdims=True)
        xhat = centered / T.sqrt(var + state.eps)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mu.data.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var.data.reshape(-1)).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.reshape(bshape).astype(x.dtype)
        sd = np.sqrt(state.running_var.reshape(bshape) + state.eps).astype(x.dtype)
        xhat = (x - mu) / sd
    return xhat * T.reshape(gamma, bshape) + T.reshape(beta, bshape)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) so inference is the identity."""
    if not training or rate == 0.0:
        return T.as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    x = T.as_tensor(x)
    keep = rng.random(x.shape) >= rate
    return x * (keep.astype(x.dtype) / x.dtype.type(1.0 - rate))


ACTIVATIONS = {
    "linear": lambda t: t,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
}


def dense(x: Tensor, W: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """``activation(x @ W + b)`` with ``W`` laid out as (inputs, units)."""
    x, W, b = T.as_tensor(x), T.as_tensor(W), T.as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != W.shape[1:]:
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    return ACTIVATIONS[activation](T.matmul(x, W) + b)


def gated_block_stack(x: Tensor, params, bn_states: dict[str, BatchNormState], spec: GatedConvSpec,
                      training: bool = False, dropout_rate: float = 0.2,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Blocks of gated layers (each followed by batch norm and dropout) with 2x2 max-pool per block.

    Parameter names are ``block{b}.layer{l}.{linear,gate}.{kernel,bias}`` plus
    ``...bn.gamma``/``...bn.beta``; batch-norm states are keyed by the layer prefix.
    """
    if min(x.shape[-2:]) < 2 ** spec.blocks:
        raise ShapeError(f"input {x.shape} too small to pool {spec.blocks} times")
    for b in range(spec.blocks):
        for l in range(spec.layers_per_block):
            prefix = f"block{b}.layer{l}."
            x = gated_conv(x, params, prefix, stride=spec.stride)
            x = batch_norm(x, params[prefix + "bn.gamma"], params[prefix + "bn.beta"], bn_states[prefix], training)
            x = dropout(x, dropout_rate, training, rng)
        x = T.maxpool2d(x, (2, 2))
    return x
