"""Conv-BN-Act cells, the two resize directions, and weight initialization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ContractViolation, InvalidArgument
from .params import _children
from .tensor import (
    BatchNormState,
    ConvWeights,
    Tensor,
    activation,
    avg_pool2,
    batchnorm,
    conv2d,
    upsample_nearest2,
)


@dataclass
class ConvBlockParams:
    conv: ConvWeights
    bn: BatchNormState
    act: str = "silu"

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels


@dataclass
class AvgPoolDown:
    """Parameter-free stand-in for a learned stride-2 block (``neck_down: avgpool``)."""


def make_conv_block(c_in: int, c_out: int, k: int = 3, stride: int = 1, act: str = "silu") -> ConvBlockParams:
    """Bias-free conv (BN supplies the affine shift) + BN + activation."""
    return ConvBlockParams(ConvWeights.zeros(c_out, c_in, k, stride=stride), BatchNormState.fresh(c_out), act)


def _apply(x: Tensor, p: ConvBlockParams, stride: int) -> Tensor:
    if x.data.ndim == 4 and x.shape[1] != p.in_channels:
        raise ContractViolation(f"conv block expects C={p.in_channels} input channels, got C={x.shape[1]}")
    y = conv2d(x, p.conv, stride=stride)
    return activation(batchnorm(y, p.bn), p.act)


def conv_block(x: Tensor, p: ConvBlockParams) -> Tensor:
    """Stride-1 conv + BN + act; a 3x3 kernel with padding 1 keeps H and W."""
    return _apply(x, p, 1)


def resize_down2(x: Tensor, p: ConvBlockParams | AvgPoolDown) -> Tensor:
    """Halve H and W with a stride-2 conv block (or 2x2 average pooling)."""
    if x.data.ndim == 4 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise InvalidArgument(f"resize_down2: spatial dims {x.shape[2]}x{x.shape[3]} must be even")
    if isinstance(p, AvgPoolDown):
        return avg_pool2(x)
    return _apply(x, p, 2)


def resize_up2(x: Tensor) -> Tensor:
    return upsample_nearest2(x)


def make_down(kind: str, channels: int, act: str = "silu"):
    """Channel-preserving downsampler for the necks."""
    if kind == "conv":
        return make_conv_block(channels, channels, 3, stride=2, act=act)
    if kind == "avgpool":
        return AvgPoolDown()
    raise InvalidArgument(f"unknown downsampler {kind!r}; expected 'conv' or 'avgpool'")


def iter_convs(obj: Any):
    """Every :class:`ConvWeights` in a parameter tree, in path order."""
    if isinstance(obj, ConvWeights):
        yield obj
        return
    if isinstance(obj, (Tensor, BatchNormState)):
        return
    for _, child in _children(obj):
        yield from iter_convs(child)


def init_weights(params: Any, seed: int) -> Any:
    """Kaiming-normal kernels (variance 2/fan_in), zero biases, identity BN.

    Deterministic: identical seeds give bitwise identical parameters.
    """
    rng = np.random.default_rng(seed)
    for w in iter_convs(params):
        O, Cg, kh, kw = w.values.shape
        std = np.sqrt(2.0 / (Cg * kh * kw))
        w.values.data = (rng.standard_normal((O, Cg, kh, kw)) * std).astype(w.values.dtype)
        if w.bias is not None:
            w.bias.data = np.zeros_like(w.bias.data)
    _reset_bn(params)
    return params


def _reset_bn(obj: Any) -> None:
    if isinstance(obj, BatchNormState):
        obj.gamma.data = np.ones_like(obj.gamma.data)
        obj.beta.data = np.zeros_like(obj.beta.data)
        obj.running_mean[...] = 0
        obj.running_var[...] = 1
        return
    if isinstance(obj, (Tensor, ConvWeights)):
        return
    for _, child in _children(obj):
        _reset_bn(child)
