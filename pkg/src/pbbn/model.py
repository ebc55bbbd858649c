"""Pyramid bottleneck block networks: layer plan, model, counts and summaries.

A PxBy network is an input block (3x3x3 conv with temporal stride 2, BN,
ReLU, 3x3x3 max pool with temporal stride 2), ``P`` pyramid blocks of ``B``
branches each, and an output block (global average pool, 2-way dense,
softmax). Branch ``l`` stacks ``l`` convs with spatial kernels
``2l-1, 2l-3, ..., 1`` (temporal kernel 3); its last conv has stride
2x2x1. Branch outputs are summed and passed through a ReLU.

With ``dws=True`` every branch conv becomes depthwise -> BN -> ReLU ->
pointwise; the input-block conv stays standard.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .layers import (
    BatchNorm,
    BatchNormSpec,
    Conv3D,
    Conv3DSpec,
    Dense,
    DenseSpec,
    DepthwiseConv3D,
    DwsConv3D,
    DwsConv3DSpec,
    GlobalAvgPool,
    Layer,
    MaxPool3D,
    PoolSpec,
    ReLU,
    mac_count,
    output_shape,
    param_count,
    softmax,
)

NUM_CLASSES = 2
_CONFIG_KEYS = ("pyramids", "branches", "dws", "base_channels", "input_h", "input_w",
                "frames", "channels", "bn_eps", "bn_momentum")


@dataclass(frozen=True)
class PbbnConfig:
    pyramids: int = 2
    branches: int = 2
    dws: bool = False
    base_channels: int = 64
    input_h: int = 96
    input_w: int = 96
    frames: int = 13
    channels: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("pyramids", "branches", "base_channels", "frames", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        floor = 3 * 2 ** self.pyramids
        if self.input_h < floor or self.input_w < floor:
            raise ValueError(f"input {self.input_h}x{self.input_w} too small for {self.pyramids} "
                             f"pyramids: need >= {floor} so global pooling sees >= 3x3")

    @property
    def name(self) -> str:
        return f"{'DWS-' if self.dws else ''}P{self.pyramids}B{self.branches}"

    def channels_in(self, p: int) -> int:
        return self.base_channels if p == 1 else self.base_channels * 2 ** (p - 2)

    def channels_out(self, p: int) -> int:
        return self.base_channels * 2 ** (p - 1)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return self.input_h, self.input_w, self.frames, self.channels

    def to_text(self) -> str:
        """Flat ``key=value`` document, one key per line, fixed key order."""
        d = asdict(self)
        lines = []
        for k in _CONFIG_KEYS:
            v = d[k]
            lines.append(f"{k}={int(v) if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PbbnConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ValueError(f"bad config line {raw!r}")
            if key == "dws":
                values[key] = val.lower() in ("1", "true", "yes")
            elif key in ("bn_eps", "bn_momentum"):
                values[key] = float(val)
            else:
                values[key] = int(val)
        return cls(**values)


# -- layer plan -------------------------------------------------------------------

def _fmt(dims) -> str:
    return "×".join(str(d) for d in dims)


@dataclass
class PlanEntry:
    name: str
    block: str
    spec: object  # layer spec, or "relu" / "add"


@dataclass
class ArchDescriptor:
    config: PbbnConfig
    input_block: list[PlanEntry]
    pyramids: list[list[list[PlanEntry]]]  # pyramid -> branch -> entries
    output_block: list[PlanEntry]
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def entries(self):
        """Entries in execution order, including synthetic add/relu merge steps."""
        yield from self.input_block
        for p, branches in enumerate(self.pyramids, 1):
            for branch in branches:
                yield from branch
            merge = "Add" if len(branches) > 1 else f"P{p}"
            if len(branches) > 1:
                yield PlanEntry(f"p{p}.add", merge, "add")
            yield PlanEntry(f"p{p}.relu", merge, "relu")
        yield from self.output_block


def _branch_entries(cfg: PbbnConfig, p: int, l: int) -> list[PlanEntry]:
    block = f"P{p}-B{l}"
    c_in, c_out = cfg.channels_in(p), cfg.channels_out(p)
    entries = []
    kernels = list(range(2 * l - 1, 0, -2))
    for j, k in enumerate(kernels, 1):
        last = j == len(kernels)
        stride = (2, 2, 1) if last else (1, 1, 1)
        cin = c_in if j == 1 else c_out
        base = f"p{p}.b{l}.conv{j}"
        if cfg.dws:
            spec = DwsConv3DSpec(k, k, 3, cin, c_out, *stride)
            entries += [
                PlanEntry(f"{base}.dw", block, spec.depthwise()),
                PlanEntry(f"{base}.dw_bn", block, BatchNormSpec(cin, cfg.bn_eps, cfg.bn_momentum)),
                PlanEntry(f"{base}.dw_relu", block, "relu"),
                PlanEntry(f"{base}.pw", block, spec.pointwise()),
            ]
        else:
            entries.append(PlanEntry(base, block, Conv3DSpec(k, k, 3, cin, c_out, *stride)))
        entries.append(PlanEntry(f"p{p}.b{l}.bn{j}", block,
                                 BatchNormSpec(c_out, cfg.bn_eps, cfg.bn_momentum)))
        if not last:
            entries.append(PlanEntry(f"p{p}.b{l}.relu{j}", block, "relu"))
    return entries


def describe(cfg: PbbnConfig) -> ArchDescriptor:
    """Expand a config into its full layer plan and announced shape trace."""
    k = cfg.base_channels
    desc = ArchDescriptor(
        config=cfg,
        input_block=[
            PlanEntry("input.conv", "Input", Conv3DSpec(3, 3, 3, cfg.channels, k, 1, 1, 2)),
            PlanEntry("input.bn", "Input", BatchNormSpec(k, cfg.bn_eps, cfg.bn_momentum)),
            PlanEntry("input.relu", "Input", "relu"),
            PlanEntry("input.pool", "Input", PoolSpec("max", 3, 3, 3, 1, 1, 2)),
        ],
        pyramids=[[_branch_entries(cfg, p, l) for l in range(1, cfg.branches + 1)]
                  for p in range(1, cfg.pyramids + 1)],
        output_block=[
            PlanEntry("output.pool", "Output", PoolSpec("global-average")),
            PlanEntry("output.fc", "Output", DenseSpec(cfg.channels_out(cfg.pyramids), NUM_CLASSES)),
        ],
    )
    shape = cfg.input_shape
    for entry in desc.input_block:
        shape = _announce(entry, shape, desc)
    for p, branches in enumerate(desc.pyramids, 1):
        ends = []
        for branch in branches:
            s = shape
            for entry in branch:
                s = _announce(entry, s, desc)
            ends.append(s)
        if len(set(ends)) != 1:
            raise ValueError(f"pyramid {p}: branch output shapes disagree: {ends}")
        shape = ends[0]
        if len(branches) > 1:
            desc.shapes[f"p{p}.add"] = shape
        desc.shapes[f"p{p}.relu"] = shape
    for entry in desc.output_block:
        shape = _announce(entry, shape, desc)
    return desc


def _announce(entry: PlanEntry, shape, desc: ArchDescriptor):
    if not isinstance(entry.spec, str):
        shape = output_shape(entry.spec, shape)
    desc.shapes[entry.name] = shape
    return shape


# -- reports ----------------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    block: str
    kind: str
    filters: str
    stride: str
    output: tuple[int, ...]
    params: int
    macs: int


@dataclass
class ParamReport:
    rows: list[ReportRow]

    @property
    def total(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)


def _row(entry: PlanEntry, in_shape, out_shape) -> ReportRow:
    spec = entry.spec
    if spec == "relu":
        return ReportRow(entry.name, entry.block, "ReLU", "-", "-", out_shape, 0, 0)
    if spec == "add":
        return ReportRow(entry.name, entry.block, "ADD", "-", "-", out_shape, 0, 0)
    if isinstance(spec, Conv3DSpec):
        depthwise = entry.name.endswith(".dw")
        pointwise = entry.name.endswith(".pw")
        kind = "DWConv" if depthwise else "PWConv" if pointwise else "3DConv"
        if depthwise:
            filters = _fmt((*spec.kernel, spec.c_in))
            params = spec.kh * spec.kw * spec.kt * spec.c_in + (spec.c_in if spec.bias else 0)
            macs = int(np.prod(out_shape)) * spec.kh * spec.kw * spec.kt
        else:
            filters = _fmt((*spec.kernel, spec.c_in, spec.c_out))
            params = param_count(spec)
            macs = mac_count(spec, in_shape)
        return ReportRow(entry.name, entry.block, kind, filters, _fmt(spec.stride),
                         out_shape, params, macs)
    if isinstance(spec, BatchNormSpec):
        return ReportRow(entry.name, entry.block, "BN", "-", "-", out_shape, param_count(spec), 0)
    if isinstance(spec, PoolSpec):
        if spec.kind == "max":
            return ReportRow(entry.name, entry.block, "MaxPool", _fmt(spec.kernel), _fmt(spec.stride),
                             out_shape, 0, 0)
        return ReportRow(entry.name, entry.block, "AvgPool", _fmt(in_shape[:3]), "-",
                         (1, 1, 1, out_shape[0]), 0, 0)
    if isinstance(spec, DenseSpec):
        return ReportRow(entry.name, entry.block, "FC", _fmt((1, spec.in_features)), "-",
                         out_shape, param_count(spec), mac_count(spec, in_shape))
    raise TypeError(f"unexpected plan entry {entry}")


def report(desc: ArchDescriptor) -> ParamReport:
    """Per-layer rows from spec arithmetic alone (no tensors are allocated)."""
    rows = []
    shape = desc.config.input_shape
    for entry in desc.input_block:
        out = desc.shapes[entry.name]
        rows.append(_row(entry, shape, out))
        shape = out
    for p, branches in enumerate(desc.pyramids, 1):
        start = shape
        for branch in branches:
            s = start
            for entry in branch:
                out = desc.shapes[entry.name]
                rows.append(_row(entry, s, out))
                s = out
        shape = desc.shapes[f"p{p}.relu"]
        merge = "Add" if len(branches) > 1 else f"P{p}"
        if len(branches) > 1:
            rows.append(_row(PlanEntry(f"p{p}.add", merge, "add"), shape, shape))
        rows.append(_row(PlanEntry(f"p{p}.relu", merge, "relu"), shape, shape))
    for entry in desc.output_block:
        out = desc.shapes[entry.name]
        rows.append(_row(entry, shape, out))
        shape = out
    return ParamReport(rows)


def closed_form_params(cfg: PbbnConfig) -> int:
    """Parameter total accumulated directly from the architecture formulas."""
    k = cfg.base_channels

    def conv(taps, ci, co):
        return taps * ci * co + co

    def dws(taps, ci, co):
        return taps * ci + ci + 2 * ci + ci * co + co

    total = conv(27, cfg.channels, k) + 2 * k
    for p in range(1, cfg.pyramids + 1):
        ci, co = cfg.channels_in(p), cfg.channels_out(p)
        for l in range(1, cfg.branches + 1):
            c = ci
            for s in range(2 * l - 1, 0, -2):
                total += (dws if cfg.dws else conv)(s * s * 3, c, co) + 2 * co
                c = co
    return total + co * NUM_CLASSES + NUM_CLASSES


# -- model ------------------------------------------------------------------------

class Pyramid:
    def __init__(self, name: str, branches: list[list[Layer]]):
        self.name = name
        self.branches = branches
        self.relu = ReLU(f"{name}.relu")

    def forward(self, x, train=False, trace=None):
        total = None
        for branch in self.branches:
            y = x
            for layer in branch:
                y = layer.forward(y, train)
                if trace is not None:
                    trace.append((layer.name, y.shape[1:]))
            total = y if total is None else total + y
        if trace is not None and len(self.branches) > 1:
            trace.append((f"{self.name}.add", total.shape[1:]))
        out = self.relu.forward(total, train)
        if trace is not None:
            trace.append((self.relu.name, out.shape[1:]))
        return out

    def backward(self, g):
        g = self.relu.backward(g)
        dx = None
        for branch in self.branches:
            d = g
            for layer in reversed(branch):
                d = layer.backward(d)
            dx = d if dx is None else dx + d
        return dx

    def layers(self):
        for branch in self.branches:
            yield from branch
        yield self.relu


def _make_layer(entry: PlanEntry, dtype) -> Layer:
    spec = entry.spec
    if spec == "relu":
        return ReLU(entry.name)
    if isinstance(spec, Conv3DSpec):
        if entry.name.endswith(".dw"):
            return DepthwiseConv3D(entry.name, spec, dtype)
        layer = Conv3D(entry.name, spec, dtype)
        if entry.name.endswith(".pw"):
            layer.kind = "PWConv"
        return layer
    if isinstance(spec, BatchNormSpec):
        return BatchNorm(entry.name, spec, dtype)
    if isinstance(spec, PoolSpec):
        return MaxPool3D(entry.name, spec) if spec.kind == "max" else GlobalAvgPool(entry.name)
    if isinstance(spec, DenseSpec):
        return Dense(entry.name, spec, dtype)
    raise TypeError(f"cannot build {entry}")


class Model:
    """A built network: plan, parameters and buffers, forward and backward."""

    def __init__(self, config: PbbnConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.descriptor = describe(config)
        d = self.descriptor
        self.input_layers = [_make_layer(e, dtype) for e in d.input_block]
        self.pyramids = [
            Pyramid(f"p{p}", [[_make_layer(e, dtype) for e in branch] for branch in branches])
            for p, branches in enumerate(d.pyramids, 1)
        ]
        self.output_layers = [_make_layer(e, dtype) for e in d.output_block]

    def layers(self):
        """Leaf layers in execution order."""
        yield from self.input_layers
        for pyr in self.pyramids:
            yield from pyr.layers()
        yield from self.output_layers

    def named_parameters(self):
        for layer in self.layers():
            for key, arr in layer.params.items():
                yield f"{layer.name}.{key}", arr

    def named_buffers(self):
        for layer in self.layers():
            for key, arr in layer.buffers.items():
                yield f"{layer.name}.{key}", arr

    def named_grads(self):
        for layer in self.layers():
            for key in layer.params:
                yield f"{layer.name}.{key}", layer.grads.get(key)

    @property
    def num_params(self) -> int:
        """Trainable scalars (BN running statistics excluded)."""
        return sum(a.size for _, a in self.named_parameters())

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers of each layer, layer by layer."""
        out = []
        for layer in self.layers():
            out += [(f"{layer.name}.{k}", v) for k, v in layer.params.items()]
            out += [(f"{layer.name}.{k}", v) for k, v in layer.buffers.items()]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.state())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            src = state[name]
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match architecture {arr.shape}")
            arr[...] = src

    def initialize(self, seed: int = 0) -> "Model":
        """He-uniform (fan-in) weights, zero biases, BN at identity."""
        rng = np.random.default_rng(seed)
        for layer in self.layers():
            w = layer.params.get("weight")
            if w is None or isinstance(layer, BatchNorm):
                continue
            if isinstance(layer, DepthwiseConv3D):
                fan_in = int(np.prod(w.shape[:3]))
            else:
                fan_in = int(np.prod(w.shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return self

    def astype(self, dtype) -> "Model":
        other = Model(self.config, dtype)
        other.load_state({k: v.astype(dtype) for k, v in self.state()})
        return other

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def logits(self, x, train=False, trace=None):
        x = np.asarray(x)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        if x.ndim != 5 or x.shape[1:] != self.config.input_shape:
            raise ValueError(f"{self.config.name}: expected batch shaped [N, "
                             f"{', '.join(map(str, self.config.input_shape))}], got {x.shape}")
        for layer in self.input_layers:
            x = layer.forward(x, train)
            if trace is not None:
                trace.append((layer.name, x.shape[1:]))
        for pyr in self.pyramids:
            x = pyr.forward(x, train, trace)
        for layer in self.output_layers:
            x = layer.forward(x, train)
            if trace is not None:
                trace.append((layer.name, x.shape[1:]))
        return x

    def forward(self, x, mode: str = "infer", trace=None) -> np.ndarray:
        """Class probabilities ``[N, 2]``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return softmax(self.logits(x, mode == "train", trace))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        g = dlogits
        for layer in reversed(self.output_layers):
            g = layer.backward(g)
        for pyr in reversed(self.pyramids):
            g = pyr.backward(g)
        for layer in reversed(self.input_layers):
            g = layer.backward(g)
        return g


def build(config: PbbnConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, dtype).initialize(seed)


def count_params(target) -> ParamReport:
    """Per-layer parameter/MAC report for a :class:`Model` or a config/descriptor.

    For a model the parameter column counts the allocated arrays; for a
    config or descriptor it comes from spec arithmetic.
    """
    if isinstance(target, PbbnConfig):
        return report(describe(target))
    if isinstance(target, ArchDescriptor):
        return report(target)
    rep = report(target.descriptor)
    sizes = {layer.name: layer.num_params for layer in target.layers()}
    for row in rep.rows:
        row.params = sizes.get(row.name, 0)
    return rep


def summarize(target) -> str:
    """Layer table in the ``block / layer / filters / stride / output / params`` layout."""
    rep = count_params(target)
    cfg = target.config if not isinstance(target, PbbnConfig) else target
    header = ("Block", "Layer", "Filters shape", "Stride", "Output", "Params")
    rows = [header] + [
        (r.block, r.kind, r.filters, r.stride, _fmt(r.output), str(r.params)) for r in rep.rows
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [f"{cfg.name} ({cfg.input_h}×{cfg.input_w}×{cfg.frames}×{cfg.channels} input)"]
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.append(f"Total params: {rep.total}")
    lines.append(f"Total MACs: {rep.total_macs}")
    return "\n".join(lines)
