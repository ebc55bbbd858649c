# cython: language_level=3
"""Compiled direct-loop kernels for 3D convolution and pooling.

All arrays are C-contiguous ``[N, H, W, T, C]`` activations and
``[kh, kw, kt, c_in, c_out]`` (standard) or ``[kh, kw, kt, C]`` (depthwise)
weights. Every output element accumulates its taps in ``(i, j, k, c_in)``
order starting from zero, and the bias is added last.
"""
import numpy as np
from libc.math cimport INFINITY
from libc.stdint cimport int64_t

ctypedef fused real:
    float
    double


DEF CO_BLOCK = 16


cdef inline void _conv_point(const real[:, :, :, :, ::1] x,
                             const real[:, :, :, :, ::1] w,
                             real* acc, Py_ssize_t c0, Py_ssize_t cb,
                             Py_ssize_t n, Py_ssize_t h0, Py_ssize_t w0, Py_ssize_t t0) noexcept nogil:
    # acc[0:cb] += sum over in-range taps and input channels, in (i, j, k, ci) order
    cdef Py_ssize_t H = x.shape[1], W = x.shape[2], T = x.shape[3], C = x.shape[4]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], kt = w.shape[2]
    cdef Py_ssize_t i, j, k, ci, co, hi, wi, ti
    cdef real xv
    cdef const real* xrow
    cdef const real* wrow
    for i in range(kh):
        hi = h0 + i
        if hi < 0 or hi >= H:
            continue
        for j in range(kw):
            wi = w0 + j
            if wi < 0 or wi >= W:
                continue
            for k in range(kt):
                ti = t0 + k
                if ti < 0 or ti >= T:
                    continue
                xrow = &x[n, hi, wi, ti, 0]
                if cb == CO_BLOCK:
                    for ci in range(C):
                        xv = xrow[ci]
                        wrow = &w[i, j, k, ci, c0]
                        for co in range(CO_BLOCK):
                            acc[co] += xv * wrow[co]
                else:
                    for ci in range(C):
                        xv = xrow[ci]
                        wrow = &w[i, j, k, ci, c0]
                        for co in range(cb):
                            acc[co] += xv * wrow[co]


def _conv3d_forward(const real[:, :, :, :, ::1] x,
                    const real[:, :, :, :, ::1] w,
                    const real[::1] b,
                    real[:, :, :, :, ::1] out,
                    int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = x.shape[0], Co = w.shape[4]
    cdef Py_ssize_t Ho = out.shape[1], Wo = out.shape[2], To = out.shape[3]
    cdef Py_ssize_t n, ho, wo, to, co, c0, cb
    cdef real acc[CO_BLOCK]
    cdef real* orow
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        orow = &out[n, ho, wo, to, 0]
                        for c0 in range(0, Co, CO_BLOCK):
                            cb = Co - c0
                            if cb > CO_BLOCK:
                                cb = CO_BLOCK
                            for co in range(CO_BLOCK):
                                acc[co] = 0
                            _conv_point(x, w, acc, c0, cb, n,
                                        ho * sh - ph, wo * sw - pw, to * st - pt)
                            for co in range(cb):
                                orow[c0 + co] = acc[co] + b[c0 + co]


def _conv3d_backward(const real[:, :, :, :, ::1] x,
                     const real[:, :, :, :, ::1] wt,
                     const real[:, :, :, :, ::1] g,
                     real[:, :, :, :, ::1] dx,
                     real[:, :, :, :, ::1] dw,
                     int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t C = x.shape[4]
    cdef Py_ssize_t kh = wt.shape[0], kw = wt.shape[1], kt = wt.shape[2], Co = wt.shape[3]
    cdef Py_ssize_t Ho = g.shape[1], Wo = g.shape[2], To = g.shape[3]
    cdef Py_ssize_t n, ho, wo, to, i, j, k, ci, co, hi, wi, ti
    cdef real xv, gv
    cdef const real* grow
    cdef const real* xrow
    cdef const real* wrow
    cdef real* dxrow
    cdef real* dwrow
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        grow = &g[n, ho, wo, to, 0]
                        for i in range(kh):
                            hi = ho * sh - ph + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(kw):
                                wi = wo * sw - pw + j
                                if wi < 0 or wi >= W:
                                    continue
                                for k in range(kt):
                                    ti = to * st - pt + k
                                    if ti < 0 or ti >= T:
                                        continue
                                    xrow = &x[n, hi, wi, ti, 0]
                                    dxrow = &dx[n, hi, wi, ti, 0]
                                    for ci in range(C):
                                        xv = xrow[ci]
                                        dwrow = &dw[i, j, k, ci, 0]
                                        for co in range(Co):
                                            dwrow[co] += xv * grow[co]
                                    # dx as an axpy over ci (wt is w with the channel axes swapped)
                                    for co in range(Co):
                                        gv = grow[co]
                                        wrow = &wt[i, j, k, co, 0]
                                        for ci in range(C):
                                            dxrow[ci] += gv * wrow[ci]


def _depthwise_forward(const real[:, :, :, :, ::1] x,
                       const real[:, :, :, ::1] w,
                       const real[::1] b,
                       real[:, :, :, :, ::1] out,
                       int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t C = x.shape[4]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], kt = w.shape[2]
    cdef Py_ssize_t Ho = out.shape[1], Wo = out.shape[2], To = out.shape[3]
    cdef Py_ssize_t n, ho, wo, to, i, j, k, c, hi, wi, ti
    cdef real* orow
    cdef const real* xrow
    cdef const real* wrow
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        orow = &out[n, ho, wo, to, 0]
                        for c in range(C):
                            orow[c] = 0
                        for i in range(kh):
                            hi = ho * sh - ph + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(kw):
                                wi = wo * sw - pw + j
                                if wi < 0 or wi >= W:
                                    continue
                                for k in range(kt):
                                    ti = to * st - pt + k
                                    if ti < 0 or ti >= T:
                                        continue
                                    xrow = &x[n, hi, wi, ti, 0]
                                    wrow = &w[i, j, k, 0]
                                    for c in range(C):
                                        orow[c] += xrow[c] * wrow[c]
                        for c in range(C):
                            orow[c] += b[c]


def _depthwise_backward(const real[:, :, :, :, ::1] x,
                        const real[:, :, :, ::1] w,
                        const real[:, :, :, :, ::1] g,
                        real[:, :, :, :, ::1] dx,
                        real[:, :, :, ::1] dw,
                        int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t C = x.shape[4]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], kt = w.shape[2]
    cdef Py_ssize_t Ho = g.shape[1], Wo = g.shape[2], To = g.shape[3]
    cdef Py_ssize_t n, ho, wo, to, i, j, k, c, hi, wi, ti
    cdef const real* grow
    cdef const real* xrow
    cdef const real* wrow
    cdef real* dxrow
    cdef real* dwrow
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        grow = &g[n, ho, wo, to, 0]
                        for i in range(kh):
                            hi = ho * sh - ph + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(kw):
                                wi = wo * sw - pw + j
                                if wi < 0 or wi >= W:
                                    continue
                                for k in range(kt):
                                    ti = to * st - pt + k
                                    if ti < 0 or ti >= T:
                                        continue
                                    xrow = &x[n, hi, wi, ti, 0]
                                    dxrow = &dx[n, hi, wi, ti, 0]
                                    wrow = &w[i, j, k, 0]
                                    dwrow = &dw[i, j, k, 0]
                                    for c in range(C):
                                        dwrow[c] += xrow[c] * grow[c]
                                        dxrow[c] += wrow[c] * grow[c]


def _maxpool3d_forward(const real[:, :, :, :, ::1] x,
                       real[:, :, :, :, ::1] out,
                       int64_t[:, :, :, :, ::1] arg,
                       int kh, int kw, int kt,
                       int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], T = x.shape[3]
    cdef Py_ssize_t C = x.shape[4]
    cdef Py_ssize_t Ho = out.shape[1], Wo = out.shape[2], To = out.shape[3]
    cdef Py_ssize_t n, ho, wo, to, i, j, k, c, hi, wi, ti
    cdef int64_t tap
    cdef real* orow
    cdef int64_t* arow
    cdef const real* xrow
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        orow = &out[n, ho, wo, to, 0]
                        arow = &arg[n, ho, wo, to, 0]
                        for c in range(C):
                            orow[c] = -INFINITY
                            arow[c] = 0
                        for i in range(kh):
                            hi = ho * sh - ph + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(kw):
                                wi = wo * sw - pw + j
                                if wi < 0 or wi >= W:
                                    continue
                                for k in range(kt):
                                    ti = to * st - pt + k
                                    if ti < 0 or ti >= T:
                                        continue
                                    tap = (i * kw + j) * kt + k
                                    xrow = &x[n, hi, wi, ti, 0]
                                    for c in range(C):
                                        if xrow[c] > orow[c]:
                                            orow[c] = xrow[c]
                                            arow[c] = tap


def _maxpool3d_backward(const real[:, :, :, :, ::1] g,
                        const int64_t[:, :, :, :, ::1] arg,
                        real[:, :, :, :, ::1] dx,
                        int kh, int kw, int kt,
                        int sh, int sw, int st, int ph, int pw, int pt):
    cdef Py_ssize_t N = g.shape[0], Ho = g.shape[1], Wo = g.shape[2], To = g.shape[3]
    cdef Py_ssize_t C = g.shape[4]
    cdef Py_ssize_t n, ho, wo, to, c, i, j, k
    cdef int64_t tap
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    for to in range(To):
                        for c in range(C):
                            tap = arg[n, ho, wo, to, c]
                            k = tap % kt
                            j = (tap // kt) % kw
                            i = tap // (kt * kw)
                            dx[n, ho * sh - ph + i, wo * sw - pw + j, to * st - pt + k, c] += g[n, ho, wo, to, c]


def _arr(a, dtype, name):
    a = np.ascontiguousarray(a)
    if a.dtype != dtype:
        raise TypeError(f"{name} is {a.dtype}, expected {dtype}")
    return a


def _check(x, w, b, g, depthwise):
    """Validate shapes at the Python boundary; the typed loops trust them."""
    x = np.ascontiguousarray(x)
    if x.dtype not in (np.float32, np.float64) or x.ndim != 5:
        raise TypeError(f"x must be a rank-5 float32/float64 array, got {x.dtype} {x.shape}")
    w = _arr(w, x.dtype, "w")
    if w.ndim != (4 if depthwise else 5) or w.shape[3] != x.shape[4]:
        raise ValueError(f"weights {w.shape} do not fit input channels {x.shape[4]}")
    c_out = x.shape[4] if depthwise else w.shape[4]
    if b is None:
        b = np.zeros(c_out, dtype=x.dtype)
    b = _arr(b, x.dtype, "b")
    if b.shape != (c_out,):
        raise ValueError(f"bias {b.shape} does not match {c_out} output channels")
    if g is not None:
        g = _arr(g, x.dtype, "g")
        if g.ndim != 5 or g.shape[0] != x.shape[0] or g.shape[4] != c_out:
            raise ValueError(f"upstream gradient {g.shape} does not fit input {x.shape}")
    return x, w, b, g


def conv3d_forward(x, w, b, stride, pad, out_size):
    x, w, b, _ = _check(x, w, b, None, False)
    out = np.empty((x.shape[0], *out_size, w.shape[4]), dtype=x.dtype)
    _conv3d_forward(x, w, b, out, *stride, *pad)
    return out


def conv3d_backward(x, w, g, stride, pad):
    x, w, _, g = _check(x, w, None, g, False)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    wt = np.ascontiguousarray(w.transpose(0, 1, 2, 4, 3))
    _conv3d_backward(x, wt, g, dx, dw, *stride, *pad)
    return dx, dw


def depthwise_forward(x, w, b, stride, pad, out_size):
    x, w, b, _ = _check(x, w, b, None, True)
    out = np.empty((x.shape[0], *out_size, x.shape[4]), dtype=x.dtype)
    _depthwise_forward(x, w, b, out, *stride, *pad)
    return out


def depthwise_backward(x, w, g, stride, pad):
    x, w, _, g = _check(x, w, None, g, True)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    _depthwise_backward(x, w, g, dx, dw, *stride, *pad)
    return dx, dw


def maxpool3d_forward(x, kernel, stride, pad, out_size):
    x = np.ascontiguousarray(x)
    shape = (x.shape[0], *out_size, x.shape[4])
    out = np.empty(shape, dtype=x.dtype)
    arg = np.empty(shape, dtype=np.int64)
    _maxpool3d_forward(x, out, arg, *kernel, *stride, *pad)
    return out, arg


def maxpool3d_backward(g, arg, x_shape, kernel, stride, pad):
    g = np.ascontiguousarray(g)
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    if g.shape != arg.shape:
        raise ValueError(f"gradient {g.shape} and argmax {arg.shape} differ")
    if arg.size and (arg.min() < 0 or arg.max() >= kernel[0] * kernel[1] * kernel[2]):
        raise ValueError("argmax holds tap indices outside the pooling window")
    dx = np.zeros(x_shape, dtype=g.dtype)
    _maxpool3d_backward(g, arg, dx, *kernel, *stride, *pad)
    return dx
