"""Layer kinds used by PBBN models, with forward, backward and cost accounting.

Activations are ``[N, H, W, T, C]`` ndarrays; conv weights are
``[kh, kw, kt, c_in, c_out]``. All convolutions and max pools use ceil-mode
SAME padding (see :func:`pbbn.kernels.same_padding`).

Every :class:`Layer` caches what its backward pass needs during
``forward(x, train=True)``; ``backward(g)`` returns the input gradient and
fills ``layer.grads`` keyed like ``layer.params``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import matmul_array, reduce_array


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class Conv3DSpec:
    kh: int
    kw: int
    kt: int
    c_in: int
    c_out: int
    sh: int = 1
    sw: int = 1
    st: int = 1
    bias: bool = True

    def __post_init__(self):
        for name in ("kh", "kw", "kt", "c_in", "c_out", "sh", "sw", "st"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.kh, self.kw, self.kt

    @property
    def stride(self) -> tuple[int, int, int]:
        return self.sh, self.sw, self.st


@dataclass(frozen=True)
class DwsConv3DSpec(Conv3DSpec):
    """Depthwise (strided, biased) -> BN(c_in) -> ReLU -> pointwise 1x1x1 (biased)."""

    def depthwise(self) -> Conv3DSpec:
        return Conv3DSpec(self.kh, self.kw, self.kt, self.c_in, self.c_in,
                          self.sh, self.sw, self.st, self.bias)

    def pointwise(self) -> Conv3DSpec:
        return Conv3DSpec(1, 1, 1, self.c_in, self.c_out, bias=self.bias)


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.channels < 1 or self.eps <= 0 or not 0 < self.momentum < 1:
            raise ValueError(f"invalid batch norm spec {self}")


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "max"
    kh: int = 3
    kw: int = 3
    kt: int = 3
    sh: int = 1
    sw: int = 1
    st: int = 1

    def __post_init__(self):
        if self.kind not in ("max", "global-average"):
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if min(self.kh, self.kw, self.kt, self.sh, self.sw, self.st) < 1:
            raise ValueError(f"pool extents must be >= 1: {self}")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return self.kh, self.kw, self.kt

    @property
    def stride(self) -> tuple[int, int, int]:
        return self.sh, self.sw, self.st


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int
    bias: bool = True

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"invalid dense spec {self}")


# -- shape arithmetic ------------------------------------------------------------

def _same(in_shape, kernel, stride):
    """Output extents and leading pads for a [H, W, T] volume."""
    outs, pads = [], []
    for n, k, s in zip(in_shape, kernel, stride):
        o, p = kernels.same_padding(n, k, s)
        outs.append(o)
        pads.append(p)
    return tuple(outs), tuple(pads)


def output_shape(spec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape announced by ``spec`` for a per-sample input ``(H, W, T, C)``."""
    if isinstance(spec, Conv3DSpec):
        if in_shape[-1] != spec.c_in:
            raise ValueError(f"channel mismatch: input has {in_shape[-1]}, spec expects {spec.c_in}")
        return (*_same(in_shape[:3], spec.kernel, spec.stride)[0], spec.c_out)
    if isinstance(spec, BatchNormSpec):
        return tuple(in_shape)
    if isinstance(spec, PoolSpec):
        if spec.kind == "global-average":
            return (in_shape[-1],)
        return (*_same(in_shape[:3], spec.kernel, spec.stride)[0], in_shape[-1])
    if isinstance(spec, DenseSpec):
        return (spec.out_features,)
    raise TypeError(f"no shape rule for {spec!r}")


# -- counting -------------------------------------------------------------------

def param_count(spec, bias: bool | None = None, inner_bn: bool = True) -> int:
    """Trainable parameter count of a layer spec.

    ``bias`` overrides the spec's bias flag; ``inner_bn=False`` drops the
    batch norm between the depthwise and pointwise stages. Both overrides
    exist to evaluate the bare factorisation ratio.
    """
    if isinstance(spec, DwsConv3DSpec):
        has_bias = spec.bias if bias is None else bias
        dw = spec.kh * spec.kw * spec.kt * spec.c_in + (spec.c_in if has_bias else 0)
        bn = 2 * spec.c_in if inner_bn else 0
        pw = spec.c_in * spec.c_out + (spec.c_out if has_bias else 0)
        return dw + bn + pw
    if isinstance(spec, Conv3DSpec):
        has_bias = spec.bias if bias is None else bias
        return spec.kh * spec.kw * spec.kt * spec.c_in * spec.c_out + (spec.c_out if has_bias else 0)
    if isinstance(spec, BatchNormSpec):
        return 2 * spec.channels
    if isinstance(spec, DenseSpec):
        has_bias = spec.bias if bias is None else bias
        return spec.in_features * spec.out_features + (spec.out_features if has_bias else 0)
    return 0


def mac_count(spec, in_shape: tuple[int, ...]) -> int:
    """Multiply-accumulates for one sample of shape ``(H, W, T, C)``."""
    if isinstance(spec, DwsConv3DSpec):
        ho, wo, to, _ = output_shape(spec, in_shape)
        positions = ho * wo * to
        return positions * spec.c_in * spec.kh * spec.kw * spec.kt + positions * spec.c_in * spec.c_out
    if isinstance(spec, Conv3DSpec):
        out = output_shape(spec, in_shape)
        return int(np.prod(out)) * spec.kh * spec.kw * spec.kt * spec.c_in
    if isinstance(spec, DenseSpec):
        return spec.in_features * spec.out_features
    return 0


def saving_ratio(spec: Conv3DSpec) -> float:
    """Bias-free parameter ratio of the depthwise-separable factorisation to ``spec``."""
    dws = DwsConv3DSpec(spec.kh, spec.kw, spec.kt, spec.c_in, spec.c_out,
                        spec.sh, spec.sw, spec.st, spec.bias)
    std = Conv3DSpec(spec.kh, spec.kw, spec.kt, spec.c_in, spec.c_out,
                     spec.sh, spec.sw, spec.st, spec.bias)
    return param_count(dws, bias=False, inner_bn=False) / param_count(std, bias=False)


# -- layers -----------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def sublayers(self) -> list["Layer"]:
        return [self]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _check_rank5(x, name):
    if x.ndim != 5:
        raise ValueError(f"{name}: expected [N, H, W, T, C] input, got shape {x.shape}")


class Conv3D(Layer):
    kind = "3DConv"

    def __init__(self, name, spec: Conv3DSpec, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        self.params["weight"] = np.zeros((*spec.kernel, spec.c_in, spec.c_out), dtype=dtype)
        if spec.bias:
            self.params["bias"] = np.zeros(spec.c_out, dtype=dtype)

    def _bias(self, x):
        b = self.params.get("bias")
        return b if b is not None else np.zeros(self.spec.c_out, dtype=x.dtype)

    def forward(self, x, train=False):
        _check_rank5(x, self.name)
        out_size, pad = _same(x.shape[1:4], self.spec.kernel, self.spec.stride)
        if x.shape[4] != self.spec.c_in:
            raise ValueError(f"{self.name}: input has {x.shape[4]} channels, expected {self.spec.c_in}")
        x = np.ascontiguousarray(x)
        self._x, self._pad = x, pad
        return kernels.conv3d_forward(x, self.params["weight"], self._bias(x),
                                      self.spec.stride, pad, out_size)

    def backward(self, g):
        g = np.ascontiguousarray(g)
        dx, dw = kernels.conv3d_backward(self._x, self.params["weight"], g,
                                         self.spec.stride, self._pad)
        self.grads["weight"] = dw
        if self.spec.bias:
            self.grads["bias"] = g.sum(axis=(0, 1, 2, 3))
        return dx

    def out_shape(self, in_shape):
        return output_shape(self.spec, in_shape)


class DepthwiseConv3D(Layer):
    kind = "DWConv"

    def __init__(self, name, spec: Conv3DSpec, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        self.params["weight"] = np.zeros((*spec.kernel, spec.c_in), dtype=dtype)
        if spec.bias:
            self.params["bias"] = np.zeros(spec.c_in, dtype=dtype)

    def forward(self, x, train=False):
        _check_rank5(x, self.name)
        if x.shape[4] != self.spec.c_in:
            raise ValueError(f"{self.name}: input has {x.shape[4]} channels, expected {self.spec.c_in}")
        out_size, pad = _same(x.shape[1:4], self.spec.kernel, self.spec.stride)
        x = np.ascontiguousarray(x)
        self._x, self._pad = x, pad
        b = self.params.get("bias", np.zeros(self.spec.c_in, dtype=x.dtype))
        return kernels.depthwise_forward(x, self.params["weight"], b, self.spec.stride, pad, out_size)

    def backward(self, g):
        g = np.ascontiguousarray(g)
        dx, dw = kernels.depthwise_backward(self._x, self.params["weight"], g,
                                            self.spec.stride, self._pad)
        self.grads["weight"] = dw
        if self.spec.bias:
            self.grads["bias"] = g.sum(axis=(0, 1, 2, 3))
        return dx

    def out_shape(self, in_shape):
        return (*_same(in_shape[:3], self.spec.kernel, self.spec.stride)[0], in_shape[-1])


class BatchNorm(Layer):
    kind = "BN"

    def __init__(self, name, spec: BatchNormSpec, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        c = spec.channels
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[-1] != self.spec.channels:
            raise ValueError(f"{self.name}: input has {x.shape[-1]} channels, "
                             f"expected {self.spec.channels}")
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        eps = x.dtype.type(self.spec.eps)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.dtype.type(self.spec.momentum)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        self._xhat, self._inv_std, self._train = xhat, inv_std, train
        self._x = x
        return xhat * gamma + beta

    def backward(self, g):
        axes = tuple(range(g.ndim - 1))
        xhat, inv_std = self._xhat, self._inv_std
        self.grads["gamma"] = (g * xhat).sum(axis=axes)
        self.grads["beta"] = g.sum(axis=axes)
        dxhat = g * self.params["gamma"]
        if not self._train:
            return dxhat * inv_std
        m = g.size // g.shape[-1]
        return (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False):
        self._mask = x > 0
        self._x = x
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, g):
        return np.where(self._mask, g, g.dtype.type(0))


class MaxPool3D(Layer):
    kind = "MaxPool"

    def __init__(self, name, spec: PoolSpec):
        super().__init__(name)
        if spec.kind != "max":
            raise ValueError("MaxPool3D needs a 'max' PoolSpec")
        self.spec = spec

    def forward(self, x, train=False):
        _check_rank5(x, self.name)
        out_size, pad = _same(x.shape[1:4], self.spec.kernel, self.spec.stride)
        x = np.ascontiguousarray(x)
        out, arg = kernels.maxpool3d_forward(x, self.spec.kernel, self.spec.stride, pad, out_size)
        self._x, self._arg, self._pad = x, arg, pad
        return out

    def backward(self, g):
        return kernels.maxpool3d_backward(np.ascontiguousarray(g), self._arg, self._x.shape,
                                          self.spec.kernel, self.spec.stride, self._pad)

    def out_shape(self, in_shape):
        return output_shape(self.spec, in_shape)


class GlobalAvgPool(Layer):
    kind = "AvgPool"

    def forward(self, x, train=False):
        _check_rank5(x, self.name)
        self._x = x
        return reduce_array(x, (1, 2, 3), "mean")

    def backward(self, g):
        n, h, w, t, c = self._x.shape
        scale = g.dtype.type(1.0 / (h * w * t))
        return np.broadcast_to((g * scale)[:, None, None, None, :], self._x.shape).copy()

    def out_shape(self, in_shape):
        return (in_shape[-1],)


class Dense(Layer):
    kind = "FC"

    def __init__(self, name, spec: DenseSpec, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        self.params["weight"] = np.zeros((spec.in_features, spec.out_features), dtype=dtype)
        if spec.bias:
            self.params["bias"] = np.zeros(spec.out_features, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.spec.in_features:
            raise ValueError(f"{self.name}: expected [N, {self.spec.in_features}] input, got {x.shape}")
        self._x = x
        out = matmul_array(x, self.params["weight"])
        if self.spec.bias:
            out += self.params["bias"]
        return out

    def backward(self, g):
        self.grads["weight"] = matmul_array(self._x.T, g)
        if self.spec.bias:
            self.grads["bias"] = g.sum(axis=0)
        return matmul_array(g, self.params["weight"].T)

    def out_shape(self, in_shape):
        return (self.spec.out_features,)


class DwsConv3D(Layer):
    """Depthwise-separable composite; its stages are ordinary sublayers."""

    kind = "DWSConv"

    def __init__(self, name, spec: DwsConv3DSpec, bn_eps=1e-5, bn_momentum=0.1, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        self.stages = [
            DepthwiseConv3D(f"{name}.dw", spec.depthwise(), dtype),
            BatchNorm(f"{name}.dw_bn", BatchNormSpec(spec.c_in, bn_eps, bn_momentum), dtype),
            ReLU(f"{name}.dw_relu"),
            Conv3D(f"{name}.pw", spec.pointwise(), dtype),
        ]
        self.stages[3].kind = "PWConv"

    def forward(self, x, train=False):
        self._x = x
        for s in self.stages:
            x = s.forward(x, train)
        return x

    def backward(self, g):
        for s in reversed(self.stages):
            g = s.backward(g)
        return g

    def sublayers(self):
        return list(self.stages)

    @property
    def num_params(self):
        return sum(s.num_params for s in self.stages)

    def out_shape(self, in_shape):
        return output_shape(self.spec, in_shape)


# -- functional entry points ------------------------------------------------------

def conv3d_forward(x, spec: Conv3DSpec, weights, bias=None):
    layer = Conv3D("conv", spec, dtype=np.asarray(x).dtype)
    layer.params["weight"] = np.ascontiguousarray(weights, dtype=layer.params["weight"].dtype)
    if spec.bias:
        layer.params["bias"] = np.ascontiguousarray(
            bias if bias is not None else np.zeros(spec.c_out), dtype=layer.params["weight"].dtype)
    expected = (*spec.kernel, spec.c_in, spec.c_out)
    if layer.params["weight"].shape != expected:
        raise ValueError(f"weights shaped {layer.params['weight'].shape}, expected {expected}")
    return layer.forward(np.asarray(x))


def dws_conv3d_forward(x, spec: DwsConv3DSpec, params: dict, train=False):
    """Run the composite with ``params`` keyed by stage: ``dw.weight``, ``dw.bias``,
    ``dw_bn.gamma``/``beta``/``running_mean``/``running_var``, ``pw.weight``, ``pw.bias``.
    Missing entries keep their initial values (BN identity, zero bias)."""
    x = np.asarray(x)
    layer = DwsConv3D("dws", spec, dtype=x.dtype)
    for stage in layer.stages:
        short = stage.name.split(".", 1)[1]
        for store in (stage.params, stage.buffers):
            for key in store:
                if f"{short}.{key}" in params:
                    store[key] = np.ascontiguousarray(params[f"{short}.{key}"], dtype=x.dtype)
    if layer.stages[3].params["weight"].ndim == 2:
        w = layer.stages[3].params["weight"]
        layer.stages[3].params["weight"] = w.reshape(1, 1, 1, *w.shape)
    return layer.forward(x, train)


def batchnorm_forward(x, layer: BatchNorm, mode: str = "infer"):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return layer.forward(np.asarray(x), train=(mode == "train"))


def maxpool3d_forward(x, spec: PoolSpec):
    return MaxPool3D("pool", spec).forward(np.asarray(x))


def global_avg_pool(x):
    return GlobalAvgPool("gap").forward(np.asarray(x))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dense_softmax_forward(x, spec: DenseSpec, weights, bias=None):
    x = np.asarray(x)
    layer = Dense("fc", spec, dtype=x.dtype)
    layer.params["weight"] = np.asarray(weights, dtype=x.dtype)
    if spec.bias:
        layer.params["bias"] = np.asarray(bias if bias is not None else np.zeros(spec.out_features),
                                          dtype=x.dtype)
    return softmax(layer.forward(x))


def layer_backward(layer: Layer, x, upstream):
    """Input gradient and parameter gradients of ``layer`` at its cached input ``x``."""
    if layer._x is None:
        raise ValueError(f"{layer.name}: no cached forward pass")
    if np.shape(layer._x) != np.shape(x):
        raise ValueError(f"{layer.name}: input shape {np.shape(x)} does not match "
                         f"cached forward input {np.shape(layer._x)}")
    dx = layer.backward(np.asarray(upstream))
    grads = {}
    for sub in layer.sublayers():
        prefix = "" if sub is layer else sub.name.split(".", 1)[-1] + "."
        grads.update({prefix + k: v for k, v in sub.grads.items()})
    return dx, grads
