"""Minimal reverse-mode autodiff over NumPy arrays.

Feature maps are rank-4 ``(N, C, H, W)`` row-major arrays. Parameter vectors
(biases, batch-norm affine terms) and the scalar loss use the same
:class:`Tensor` type with lower rank.

Each operator records a closure that maps the output gradient to gradients
of its parents. :meth:`Tensor.backward` walks the graph once in reverse
topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractViolation, InvalidArgument, NonFiniteError

_grad_enabled = True
_check_finite = False
_op_counters: list[Counter] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation and finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NonFiniteError` naming the first op that emits NaN/Inf."""
    global _check_finite
    prev, _check_finite = _check_finite, True
    try:
        yield
    finally:
        _check_finite = prev


@contextlib.contextmanager
def count_ops():
    """Collect multiply-accumulate counts per op kind during forward passes.

    Conventions: conv = out_elems * in_per_group * kh * kw; norm, act and
    resize = out_elems; rearrangements and concat = 0.
    """
    counter: Counter = Counter()
    _op_counters.append(counter)
    try:
        yield counter
    finally:
        _op_counters.remove(counter)


def _record(kind: str, macs: int) -> None:
    for c in _op_counters:
        c[kind] += int(macs)


class Tensor:
    """Array with an optional gradient slot and a link into the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgument("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            if node is not self:
                node.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if _check_finite and not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient flowing into {t.op!r} tensor {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; ``backward(g)`` must call ``_accum`` on parents."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op {op!r}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ContractViolation(f"{op}: expected an N x C x H x W tensor, got shape {x.shape}")


def _common(*arrays):
    dt = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dt) for a in arrays]


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvWeights:
    """Convolution kernel ``values`` of shape (out, in_per_group, kh, kw)."""

    values: Tensor
    bias: Tensor | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0

    @classmethod
    def zeros(cls, out_channels, in_per_group, k=3, *, groups=1, bias=False,
              stride=1, padding=None, dtype=np.float32):
        if out_channels % groups:
            raise InvalidArgument(f"out_channels={out_channels} not divisible by groups={groups}")
        vals = Tensor(np.zeros((out_channels, in_per_group, k, k), dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        return cls(vals, b, groups, stride, k // 2 if padding is None else padding)

    @property
    def out_channels(self) -> int:
        return self.values.shape[0]

    @property
    def in_channels_per_group(self) -> int:
        return self.values.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @property
    def in_channels(self) -> int:
        return self.groups * self.in_channels_per_group


@dataclass
class BatchNormState:
    """Per-channel affine batch norm with running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32):
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# --------------------------------------------------------------------------
# operators


def conv2d(x: Tensor, w: ConvWeights, stride: int | None = None, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with grouped semantics.

    Output channel ``o`` reads input group ``o // (out_channels / groups)``.
    Depthwise layouts (one input channel per group) use a direct kernel;
    everything else goes through im2col + GEMM.
    """
    stride = w.stride if stride is None else stride
    padding = w.padding if padding is None else padding
    if stride <= 0 or w.groups <= 0:
        raise InvalidArgument(f"conv2d: stride={stride} and groups={w.groups} must be positive")
    if padding < 0:
        raise InvalidArgument(f"conv2d: padding={padding} must be non-negative")
    _check_rank4(x, "conv2d")
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.values.shape
    G = w.groups
    if O % G:
        raise ContractViolation(f"conv2d: out_channels={O} not divisible by groups={G}")
    if C != G * Cg:
        raise ContractViolation(
            f"conv2d: input channels C={C} != groups*in_channels_per_group={G}*{Cg}")
    if H + 2 * padding < kh:
        raise ContractViolation(f"conv2d: padded height H={H}+2*{padding} smaller than kernel kh={kh}")
    if W + 2 * padding < kw:
        raise ContractViolation(f"conv2d: padded width W={W}+2*{padding} smaller than kernel kw={kw}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xd, wd = _common(x.data, w.values.data)
    bias = w.bias

    if Cg == 1 and G == C and G > 1:
        w3 = wd.reshape(O, kh, kw)
        out = kernels.depthwise_forward(xd, w3, stride, padding)

        def backward(g):
            g = np.ascontiguousarray(g, dtype=xd.dtype)
            if x.requires_grad or w.values.requires_grad:
                dx, dw = kernels.depthwise_backward(xd, w3, g, stride, padding)
                _accum(x, dx)
                _accum(w.values, dw.reshape(O, 1, kh, kw))
            if bias is not None:
                _accum(bias, g.sum(axis=(0, 2, 3)))
    else:
        L = Ho * Wo
        K = Cg * kh * kw
        pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
        cols = xd.reshape(N, C, H * W) if pointwise else kernels.im2col(xd, kh, kw, stride, padding)
        if G == 1:
            w2 = wd.reshape(O, K)
            out = np.matmul(w2, cols)
        else:
            cols = cols.reshape(N, G, K, L)
            w2 = wd.reshape(G, O // G, K)
            out = np.matmul(w2, cols)
        out = out.reshape(N, O, Ho, Wo)

        def backward(g):
            g = np.asarray(g, dtype=xd.dtype)
            if G == 1:
                gm = g.reshape(N, O, L)
                if w.values.requires_grad:
                    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
                    _accum(w.values, dw.reshape(O, Cg, kh, kw))
                if x.requires_grad:
                    dcols = np.matmul(w2.T, gm)
            else:
                gm = g.reshape(N, G, O // G, L)
                if w.values.requires_grad:
                    dw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)
                    _accum(w.values, dw.reshape(O, Cg, kh, kw))
                if x.requires_grad:
                    dcols = np.matmul(w2.transpose(0, 2, 1), gm).reshape(N, G * K, L)
            if x.requires_grad:
                if pointwise:
                    _accum(x, dcols.reshape(N, C, H, W))
                else:
                    _accum(x, kernels.col2im(np.ascontiguousarray(dcols), C, H, W, kh, kw, stride, padding))
            if bias is not None:
                _accum(bias, g.sum(axis=(0, 2, 3)))

    if bias is not None:
        out = out + bias.data.astype(out.dtype)[None, :, None, None]
    _record("conv", N * O * Ho * Wo * Cg * kh * kw)
    parents = (x, w.values) if bias is None else (x, w.values, bias)
    return make_op(out, parents, backward, "conv2d")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: (N, C, H, W) -> (N, C*r*r, H/r, W/r), channel-major.

    ``out[n, c*r*r + i*r + j, h, w] = x[n, c, h*r + i, w*r + j]``.
    """
    _check_rank4(x, "pixel_unshuffle")
    if r <= 0:
        raise InvalidArgument(f"pixel_unshuffle: factor r={r} must be positive")
    N, C, H, W = x.shape
    if H % r or W % r:
        raise InvalidArgument(f"pixel_unshuffle: H={H}, W={W} not divisible by r={r}")
    if r == 1:
        return x
    out = kernels.pixel_unshuffle(np.ascontiguousarray(x.data), r)

    def backward(g):
        _accum(x, kernels.pixel_shuffle(np.ascontiguousarray(g), r))

    return make_op(out, (x,), backward, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle`."""
    _check_rank4(x, "pixel_shuffle")
    if r <= 0:
        raise InvalidArgument(f"pixel_shuffle: factor r={r} must be positive")
    if x.shape[1] % (r * r):
        raise InvalidArgument(f"pixel_shuffle: C={x.shape[1]} not divisible by r*r={r * r}")
    if r == 1:
        return x
    out = kernels.pixel_shuffle(np.ascontiguousarray(x.data), r)

    def backward(g):
        _accum(x, kernels.pixel_unshuffle(np.ascontiguousarray(g), r))

    return make_op(out, (x,), backward, "pixel_shuffle")


def upsample_nearest2(x: Tensor) -> Tensor:
    _check_rank4(x, "upsample_nearest2")
    N, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(N, C, 2 * H, 2 * W)

    def backward(g):
        _accum(x, g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    _record("resize", out.size)
    return make_op(out, (x,), backward, "upsample_nearest2")


def avg_pool2(x: Tensor) -> Tensor:
    """Parameter-free 2x2 mean pooling, stride 2."""
    _check_rank4(x, "avg_pool2")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise InvalidArgument(f"avg_pool2: H={H}, W={W} must be even")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gg = np.broadcast_to((g * 0.25)[:, :, :, None, :, None], (N, C, H // 2, 2, W // 2, 2))
        _accum(x, gg.reshape(N, C, H, W))

    _record("resize", out.size)
    return make_op(out, (x,), backward, "avg_pool2")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise InvalidArgument("concat_channels: need at least one tensor")
    for t in xs:
        _check_rank4(t, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        s = t.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ContractViolation(f"concat_channels: N/H/W mismatch between {ref} and {s}")
    if len(xs) == 1:
        return xs[0]
    dt = np.result_type(*[t.data for t in xs])
    out = np.concatenate([t.data.astype(dt, copy=False) for t in xs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, a, b in zip(xs, offsets[:-1], offsets[1:]):
            _accum(t, g[:, a:b])

    return make_op(out, tuple(xs), backward, "concat")


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch norm over N*H*W per channel; updates running stats in training mode."""
    _check_rank4(x, "batchnorm")
    N, C, H, W = x.shape
    if state.channels != C:
        raise ContractViolation(f"batchnorm: state has {state.channels} channels, input has C={C}")
    gamma, beta = state.gamma, state.beta
    xd, gd, bd = _common(x.data, gamma.data, beta.data)
    axes = (0, 2, 3)
    if state.training:
        n = N * H * W
        mean = xd.mean(axis=axes)
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        invstd = 1.0 / np.sqrt(var + state.eps)
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        n = None
        mean = state.running_mean.astype(xd.dtype)
        xc = xd - mean[None, :, None, None]
        invstd = 1.0 / np.sqrt(state.running_var.astype(xd.dtype) + state.eps)
    xhat = xc * invstd[None, :, None, None]
    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]
    training = state.training

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gd[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (dxhat - s1 / n - xhat * (s2 / n)) * invstd[None, :, None, None]
        else:
            dx = dxhat * invstd[None, :, None, None]
        _accum(x, dx)

    _record("norm", out.size)
    return make_op(out, (x, gamma, beta), backward, "batchnorm")


GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def sigmoid(a: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``gelu`` (tanh approximation), ``silu`` or ``identity``."""
    if kind == "identity":
        return x
    a = x.data
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (a + GELU_COEF * (a * a * a))
        t = np.tanh(u)
        out = 0.5 * a * (1.0 + t)

        def backward(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * a * a)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du))
    elif kind == "silu":
        s = sigmoid(a)
        out = a * s

        def backward(g):
            _accum(x, g * (s * (1.0 + a * (1.0 - s))))
    else:
        raise InvalidArgument(f"activation: unknown kind {kind!r}")
    _record("act", out.size)
    return make_op(out, (x,), backward, kind)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape

    def backward(g):
        _accum(x, np.broadcast_to(g, shape))

    return make_op(np.asarray(x.data.sum()), (x,), backward, "sum")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return make_op(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(x, g * c)

    return make_op(x.data * c, (x,), backward, "scale")


# --------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor that depends on
    ``inputs``. The inputs are promoted to float64 for the duration of the
    check; the error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    if eps <= 0:
        raise InvalidArgument(f"grad_check: eps={eps} must be positive")
    saved = [(t.data, t.grad, t.requires_grad) for t in inputs]
    try:
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64)
            t.grad = None
            t.requires_grad = True
        with detect_anomaly():
            out = f()
            if out.data.size != 1:
                raise InvalidArgument(f"grad_check: f must be scalar-valued, got shape {out.shape}")
            out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
        worst = 0.0
        with no_grad(), detect_anomaly():
            for t, a in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                    flat[i] = orig
                    fd = (fp - fm) / (2 * eps)
                    err = abs(a.reshape(-1)[i] - fd) / max(1.0, abs(fd))
                    worst = max(worst, err)
        return worst
    finally:
        for t, (d, g, rg) in zip(inputs, saved):
            t.data, t.grad, t.requires_grad = d, g, rg
