"""Vectorised numpy kernels; same contract as the compiled ``_ckernels``.

Each kernel loops over the (at most 27) kernel taps in Python and does the
per-tap work as one strided numpy operation, so the per-element cost is
paid in BLAS / ufunc loops rather than the interpreter.
"""
import itertools

import numpy as np


def _pad(x, kernel, stride, pad, out_size, value=0.0):
    """Pad the three spatial/temporal axes so every tap slice is in range."""
    widths = [(0, 0)]
    for n, k, s, p, o in zip(x.shape[1:4], kernel, stride, pad, out_size):
        need = (o - 1) * s + k
        widths.append((p, max(need - n - p, 0)))
    widths.append((0, 0))
    return np.pad(x, widths, constant_values=value)


def _tap_slice(i, j, k, stride, out_size):
    sh, sw, st = stride
    ho, wo, to = out_size
    return (
        slice(None),
        slice(i, i + sh * (ho - 1) + 1, sh),
        slice(j, j + sw * (wo - 1) + 1, sw),
        slice(k, k + st * (to - 1) + 1, st),
        slice(None),
    )


def _taps(kernel):
    return itertools.product(range(kernel[0]), range(kernel[1]), range(kernel[2]))


def _unpad(xp, x_shape, pad):
    _, h, w, t, _ = x_shape
    return xp[:, pad[0]:pad[0] + h, pad[1]:pad[1] + w, pad[2]:pad[2] + t, :]


def conv3d_forward(x, w, b, stride, pad, out_size):
    kernel = w.shape[:3]
    xp = _pad(x, kernel, stride, pad, out_size)
    out = np.zeros((x.shape[0], *out_size, w.shape[4]), dtype=x.dtype)
    for i, j, k in _taps(kernel):
        out += xp[_tap_slice(i, j, k, stride, out_size)] @ w[i, j, k]
    if b is not None:
        out += b
    return out


def conv3d_backward(x, w, g, stride, pad):
    kernel = w.shape[:3]
    out_size = g.shape[1:4]
    c_in, c_out = w.shape[3], w.shape[4]
    xp = _pad(x, kernel, stride, pad, out_size)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    g2 = g.reshape(-1, c_out)
    for i, j, k in _taps(kernel):
        sl = _tap_slice(i, j, k, stride, out_size)
        dw[i, j, k] = xp[sl].reshape(-1, c_in).T @ g2
        dxp[sl] += g @ w[i, j, k].T
    return np.ascontiguousarray(_unpad(dxp, x.shape, pad)), dw


def depthwise_forward(x, w, b, stride, pad, out_size):
    kernel = w.shape[:3]
    xp = _pad(x, kernel, stride, pad, out_size)
    out = np.zeros((x.shape[0], *out_size, x.shape[4]), dtype=x.dtype)
    for i, j, k in _taps(kernel):
        out += xp[_tap_slice(i, j, k, stride, out_size)] * w[i, j, k]
    if b is not None:
        out += b
    return out


def depthwise_backward(x, w, g, stride, pad):
    kernel = w.shape[:3]
    out_size = g.shape[1:4]
    xp = _pad(x, kernel, stride, pad, out_size)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i, j, k in _taps(kernel):
        sl = _tap_slice(i, j, k, stride, out_size)
        dw[i, j, k] = (xp[sl] * g).sum(axis=(0, 1, 2, 3))
        dxp[sl] += g * w[i, j, k]
    return np.ascontiguousarray(_unpad(dxp, x.shape, pad)), dw


def maxpool3d_forward(x, kernel, stride, pad, out_size):
    xp = _pad(x, kernel, stride, pad, out_size, value=-np.inf)
    shape = (x.shape[0], *out_size, x.shape[4])
    out = np.full(shape, -np.inf, dtype=x.dtype)
    arg = np.zeros(shape, dtype=np.int64)
    for tap, (i, j, k) in enumerate(_taps(kernel)):
        v = xp[_tap_slice(i, j, k, stride, out_size)]
        better = v > out
        out = np.where(better, v, out)
        arg[better] = tap
    return out, arg


def maxpool3d_backward(g, arg, x_shape, kernel, stride, pad):
    out_size = g.shape[1:4]
    padded = [x_shape[0]]
    for n, k, s, p, o in zip(x_shape[1:4], kernel, stride, pad, out_size):
        padded.append(max((o - 1) * s + k, n + p))
    padded.append(x_shape[4])
    dxp = np.zeros(padded, dtype=g.dtype)
    for tap, (i, j, k) in enumerate(_taps(kernel)):
        dxp[_tap_slice(i, j, k, stride, out_size)] += np.where(arg == tap, g, 0)
    return np.ascontiguousarray(_unpad(dxp, x_shape, pad))
