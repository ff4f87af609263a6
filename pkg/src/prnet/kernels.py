"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
NumPy fallback. Set ``PRNET_PURE_PYTHON=1`` to force the fallback.
"""

import contextlib
import os

from . import _fallback

if os.environ.get("PRNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    out = {"python": _fallback}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out


im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
pixel_unshuffle = _impl.pixel_unshuffle
pixel_shuffle = _impl.pixel_shuffle

_NAMES = ("im2col", "col2im", "depthwise_forward", "depthwise_backward", "pixel_unshuffle", "pixel_shuffle")


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route every kernel through backend ``name``."""
    global BACKEND
    mods = available_backends()
    if name not in mods:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(mods)}")
    g = globals()
    saved = {n: g[n] for n in _NAMES}, BACKEND
    for n in _NAMES:
        g[n] = getattr(mods[name], n)
    BACKEND = name
    try:
        yield mods[name]
    finally:
        g.update(saved[0])
        BACKEND = saved[1]
