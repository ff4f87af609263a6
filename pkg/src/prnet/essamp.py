"""Enhanced SliceSamp: pixel-unshuffle, depth-multiplied depthwise conv, pointwise compression.

    Y = GELU(BN2(W_pw * GELU(BN1(W_edw (depthwise) PixelUnShuffle_2(X)))))

``slicesamp_forward`` is the d=1 reference that rearranges with explicit
strided slices in offset-major order instead of pixel-unshuffle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidArgument
from .tensor import (
    BatchNormState,
    ConvWeights,
    Tensor,
    activation,
    batchnorm,
    conv2d,
    make_op,
    _accum,
    pixel_unshuffle,
)

OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class ESSampConfig:
    c_in: int
    c_out: int
    d: int = 2

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.d) <= 0:
            raise InvalidArgument(f"ESSampConfig fields must be positive: {self}")

    @property
    def expanded(self) -> int:
        return 4 * self.d * self.c_in


@dataclass
class ESSampParams:
    w1_edw: ConvWeights
    bn1: BatchNormState
    w2_pw: ConvWeights
    bn2: BatchNormState
    d: int = 2

    @property
    def c_in(self) -> int:
        return self.w1_edw.groups // 4

    @property
    def c_out(self) -> int:
        return self.w2_pw.out_channels


def make_essamp(cfg: ESSampConfig) -> ESSampParams:
    """Zero-initialized parameters; the d kernels of channel k sit in rows [k*d, (k+1)*d)."""
    c4 = 4 * cfg.c_in
    return ESSampParams(
        w1_edw=ConvWeights.zeros(cfg.expanded, 1, 3, groups=c4, stride=1, padding=1),
        bn1=BatchNormState.fresh(cfg.expanded),
        w2_pw=ConvWeights.zeros(cfg.c_out, cfg.expanded, 1, stride=1, padding=0),
        bn2=BatchNormState.fresh(cfg.c_out),
        d=cfg.d,
    )


def essamp_param_count(cfg: ESSampConfig) -> int:
    """Learnables: 3x3 depthwise (36dC) + BN1 (8dC) + pointwise (4dC*c_out) + BN2 (2*c_out)."""
    C, d, co = cfg.c_in, cfg.d, cfg.c_out
    return 36 * d * C + 8 * d * C + 4 * d * C * co + 2 * co


def _check_input(p: ESSampParams, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ContractViolation(f"ESSamp expects an N x C x H x W tensor, got {x.shape}")
    if x.shape[1] != p.c_in:
        raise ContractViolation(f"ESSamp built for C={p.c_in} input channels, got C={x.shape[1]}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise InvalidArgument(f"ESSamp needs even H and W, got {x.shape[2]}x{x.shape[3]}")


def _tail(p: ESSampParams, x: Tensor) -> Tensor:
    y = activation(batchnorm(conv2d(x, p.w1_edw, stride=1, padding=1), p.bn1), "gelu")
    return activation(batchnorm(conv2d(y, p.w2_pw, stride=1, padding=0), p.bn2), "gelu")


def essamp_forward(p: ESSampParams, x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, c_out, H/2, W/2)."""
    _check_input(p, x)
    return _tail(p, pixel_unshuffle(x, 2))


def slice_concat(x: Tensor) -> Tensor:
    """``Concat(x[:, :, i::2, j::2])`` over offsets (0,0), (0,1), (1,0), (1,1)."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise InvalidArgument(f"slice_concat needs even H and W, got {H}x{W}")
    out = np.concatenate([x.data[:, :, i::2, j::2] for i, j in OFFSETS], axis=1)

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        for k, (i, j) in enumerate(OFFSETS):
            gx[:, :, i::2, j::2] = g[:, k * C:(k + 1) * C]
        _accum(x, gx)

    return make_op(out, (x,), backward, "slice_concat")


def slicesamp_forward(p: ESSampParams, x: Tensor) -> Tensor:
    """SliceSamp reference (d = 1) with explicit offset-major slicing."""
    if p.d != 1:
        raise InvalidArgument(f"slicesamp_forward is defined for d=1, got d={p.d}")
    _check_input(p, x)
    return _tail(p, slice_concat(x))


def slice_to_unshuffle_perm(c: int) -> np.ndarray:
    """``perm[s]`` = pixel-unshuffle channel holding the same values as slice channel ``s``.

    Slice channel ``(2i + j) * c + k`` and unshuffle channel ``4k + 2i + j``
    both carry ``x[:, k, i::2, j::2]``.
    """
    perm = np.empty(4 * c, dtype=np.int64)
    for o, (i, j) in enumerate(OFFSETS):
        for k in range(c):
            perm[o * c + k] = 4 * k + 2 * i + j
    return perm


def to_slice_layout(p: ESSampParams) -> ESSampParams:
    """Reorder d=1 weights so ``slicesamp_forward(q, x) == essamp_forward(p, x)``."""
    if p.d != 1:
        raise InvalidArgument("channel transport between layouts is defined for d=1")
    perm = slice_to_unshuffle_perm(p.c_in)

    def bn_perm(bn: BatchNormState) -> BatchNormState:
        return BatchNormState(
            Tensor(bn.gamma.data[perm], requires_grad=True),
            Tensor(bn.beta.data[perm], requires_grad=True),
            bn.running_mean[perm].copy(),
            bn.running_var[perm].copy(),
            bn.eps, bn.momentum, bn.training,
        )

    w1 = ConvWeights(Tensor(p.w1_edw.values.data[perm], requires_grad=True), None,
                     p.w1_edw.groups, 1, 1)
    w2 = ConvWeights(Tensor(p.w2_pw.values.data[:, perm], requires_grad=True), None, 1, 1, 0)
    bn2 = BatchNormState(
        Tensor(p.bn2.gamma.data.copy(), requires_grad=True),
        Tensor(p.bn2.beta.data.copy(), requires_grad=True),
        p.bn2.running_mean.copy(), p.bn2.running_var.copy(),
        p.bn2.eps, p.bn2.momentum, p.bn2.training,
    )
    return ESSampParams(w1, bn_perm(p.bn1), w2, bn2, d=1)
