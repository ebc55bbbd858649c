"""Hot-loop kernels for 3D convolution and max pooling.

Two interchangeable backends implement the same functions:

``compiled``
    Cython direct loops (``_ckernels``), built by ``pip install -e .``.
``python``
    numpy per-tap vectorisation (``_pykernels``), always available.

The compiled backend is chosen at import when it can be loaded. Set
``PBBN_BACKEND=python`` (or ``compiled``) to force one. Callers go through
the module-level names below, which are rebound by :func:`use_backend`.
"""
import importlib
import math
import os

from . import _pykernels

__all__ = [
    "BACKEND",
    "available_backends",
    "get_backend",
    "use_backend",
    "same_padding",
    "conv3d_forward",
    "conv3d_backward",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
]

_KERNELS = (
    "conv3d_forward",
    "conv3d_backward",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
)

try:
    _ckernels = importlib.import_module("._ckernels", __name__)
except ImportError:  # extension not built
    _ckernels = None


def available_backends():
    return ["compiled", "python"] if _ckernels is not None else ["python"]


def get_backend(name):
    """Return the kernel module for ``name`` without changing the active one."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def use_backend(name):
    """Switch the active backend for every caller of this module."""
    global BACKEND
    mod = get_backend(name)
    for fn in _KERNELS:
        globals()[fn] = getattr(mod, fn)
    BACKEND = name


def same_padding(size, kernel, stride):
    """Ceil-mode SAME output extent and leading pad along one axis.

    The output extent is ``ceil(size / stride)``. When the total padding is
    odd the extra element goes on the trailing side.
    """
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2


_requested = os.environ.get("PBBN_BACKEND", "").strip().lower()
BACKEND = "python"
use_backend(_requested or ("compiled" if _ckernels is not None else "python"))
