"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
kernels are used. ``PROMPTFED_PURE=1`` forces the numpy path.
"""

import os

from . import _kernels_py

KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "attention_fwd",
    "attention_bwd",
)


def _load_compiled():
    if os.environ.get("PROMPTFED_PURE", "") not in ("", "0"):
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
kernels = _compiled if _compiled is not None else _kernels_py
NAME = "cython" if _compiled is not None else "numpy"
# bump when a kernel changes numerically; part of the backbone cache key
KERNEL_VERSION = 2


def available():
    """Backends importable in this environment, preferred first."""
    names = []
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    names.append("numpy")
    return names


def get(name):
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def use(name):
    """Switch the active backend process-wide (benchmarks and tests)."""
    global kernels, NAME
    kernels = get(name)
    NAME = name
