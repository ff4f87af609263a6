"""Walkers over nested parameter dataclasses.

Models are plain dataclass trees whose leaves are :class:`Tensor` (learnable
values) and :class:`BatchNormState` (learnable affine terms plus running
statistics). Paths are dotted field names with list indices, e.g.
``neck.stages.0.t3.conv.values``.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Iterator

import numpy as np

from .tensor import BatchNormState, ConvWeights, Tensor


def _children(obj: Any) -> Iterator[tuple[str, Any]]:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield f.name, getattr(obj, f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield str(i), v
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield str(k), v


def named_parameters(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(path, tensor)`` for every learnable tensor, depth-first in field order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    for name, child in _children(obj):
        yield from named_parameters(child, f"{prefix}.{name}" if prefix else name)


def parameters(obj: Any) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def named_buffers(obj: Any, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Running batch-norm statistics (saved in checkpoints, never trained)."""
    if isinstance(obj, BatchNormState):
        yield f"{prefix}.running_mean", obj.running_mean
        yield f"{prefix}.running_var", obj.running_var
        return
    if isinstance(obj, Tensor):
        return
    for name, child in _children(obj):
        yield from named_buffers(child, f"{prefix}.{name}" if prefix else name)


def decay_flags(obj: Any) -> list[bool]:
    """True for convolution kernels, False for biases and batch-norm affine terms.

    Order matches :func:`parameters`.
    """
    flags: list[bool] = []

    def walk(o):
        if isinstance(o, ConvWeights):
            flags.append(True)
            if o.bias is not None:
                flags.append(False)
            return
        if isinstance(o, BatchNormState):
            flags.extend([False, False])
            return
        if isinstance(o, Tensor):
            if o.requires_grad:
                flags.append(False)
            return
        for _, child in _children(o):
            walk(child)

    walk(obj)
    return flags


def set_training(obj: Any, training: bool) -> None:
    if isinstance(obj, BatchNormState):
        obj.training = training
        return
    for _, child in _children(obj):
        set_training(child, training)


def zero_grad(obj: Any) -> None:
    for t in parameters(obj):
        t.grad = None


def cast(obj: Any, dtype) -> None:
    """Convert every tensor and running statistic in place to ``dtype``."""
    if isinstance(obj, Tensor):
        obj.data = obj.data.astype(dtype)
        return
    if isinstance(obj, BatchNormState):
        obj.gamma.data = obj.gamma.data.astype(dtype)
        obj.beta.data = obj.beta.data.astype(dtype)
        obj.running_mean = obj.running_mean.astype(dtype)
        obj.running_var = obj.running_var.astype(dtype)
        return
    for _, child in _children(obj):
        cast(child, dtype)
