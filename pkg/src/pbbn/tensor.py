"""Minimal dense N-d array used as the public carrier of activations/weights.

Storage is a read-only, C-contiguous (row-major) numpy buffer in float32 or
float64. Layers work on plain ndarrays internally; :class:`TensorND` is the
validated, immutable wrapper exposed at API boundaries.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class TensorND:
    __slots__ = ("_data",)

    def __init__(self, array: np.ndarray):
        array = np.asarray(array)
        if array.dtype.type not in DTYPES:
            raise TypeError(f"unsupported dtype {array.dtype}; use float32 or float64")
        if array.ndim < 1 or 0 in array.shape:
            raise ValueError(f"invalid shape {array.shape}: rank >= 1 and extents >= 1 required")
        data = np.array(array, order="C", copy=True)
        data.setflags(write=False)
        self._data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def rank(self) -> int:
        return self._data.ndim

    def flatten(self) -> np.ndarray:
        """Row-major copy of the buffer."""
        return self._data.ravel().copy()

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, TensorND):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __repr__(self):
        return f"TensorND(shape={list(self.shape)}, dtype={self.dtype.name})"


def create(shape: Sequence[int], fill=0.0, dtype=np.float32) -> TensorND:
    """Build a tensor from a scalar fill value or a flat row-major buffer."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise ValueError(f"invalid shape {list(shape)}: every extent must be >= 1")
    if np.isscalar(fill):
        return TensorND(np.full(shape, fill, dtype=dtype))
    buf = np.asarray(fill, dtype=dtype).ravel()
    n = int(np.prod(shape))
    if buf.size != n:
        raise ValueError(f"buffer has {buf.size} elements, shape {list(shape)} needs {n}")
    return TensorND(buf.reshape(shape))


def _check_axes(axes: Iterable[int], rank: int) -> tuple[int, ...]:
    axes = tuple(axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes in {axes}")
    for a in axes:
        if not 0 <= a < rank:
            raise ValueError(f"axis {a} out of range for rank {rank}")
    return tuple(sorted(axes))


def reduce_array(x: np.ndarray, axes, kind: str, keepdims: bool = False) -> np.ndarray:
    """ndarray-level reduction shared by :func:`reduce` and the pooling layers."""
    axes = _check_axes(axes, x.ndim)
    if kind == "sum":
        return np.sum(x, axis=axes, keepdims=keepdims)
    if kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes]))
        return np.sum(x, axis=axes, keepdims=keepdims) / x.dtype.type(count)
    if kind == "max":
        return np.max(x, axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def reduce(t: TensorND, axes, kind: str = "sum", keepdims: bool = False) -> TensorND:
    out = reduce_array(t.numpy(), axes, kind, keepdims)
    # a full reduction without keepdims still yields a rank-1 tensor
    return TensorND(np.atleast_1d(out))


def matmul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated as a running sum over the inner index.

    Each output element is ``((a0*b0 + a1*b1) + a2*b2) + ...`` in index
    order, so results are reproducible independent of the BLAS in use.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def matmul(a: TensorND, b: TensorND) -> TensorND:
    return TensorND(matmul_array(a.numpy(), b.numpy()))
