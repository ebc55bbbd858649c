"""Binary checkpoint format.

Little-endian throughout::

    b"PBBN"  u16 version
    u32 n, n bytes   architecture config (key=value text)
    u8 has_policy [u32 target_h, u32 target_w, u8 up, u8 down]
    u16 n, n bytes   normalisation tag
    u32 records
    per record: u16 n, n bytes name; u8 dtype (1=f32, 2=f64); u8 rank;
                rank x u32 extents; raw values

Records are every parameter and buffer of the model in
:meth:`pbbn.model.Model.state` order, so the byte stream is a pure
function of the model.
"""
from __future__ import annotations

import struct

import numpy as np

from .model import Model, PbbnConfig
from .resample import NORMALIZATION, InterpMethod, ResizePolicy

MAGIC = b"PBBN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_METHODS = list(InterpMethod)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def dumps(model: Model, policy: ResizePolicy | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    cfg = model.config.to_text().encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    if policy is None:
        out += b"\x00"
    else:
        out += struct.pack("<BIIBB", 1, policy.target_h, policy.target_w,
                           _METHODS.index(policy.up), _METHODS.index(policy.down))
    tag = NORMALIZATION.encode("utf-8")
    out += struct.pack("<H", len(tag)) + tag
    state = model.state()
    out += struct.pack("<I", len(state))
    for name, arr in state:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.data)} "
                                 f"(needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, expected: PbbnConfig | None = None) -> tuple[Model, ResizePolicy | None]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a PBBN checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (n,) = r.unpack("<I")
    config = PbbnConfig.from_text(r.take(n).decode("utf-8"))
    if expected is not None and expected != config:
        raise ArchitectureMismatchError(f"checkpoint holds {config.name} ({config}), "
                                        f"expected {expected.name} ({expected})")
    policy = None
    if r.unpack("<B")[0]:
        th, tw, up, down = r.unpack("<IIBB")
        policy = ResizePolicy(th, tw, _METHODS[up], _METHODS[down])
    (n,) = r.unpack("<H")
    tag = r.take(n).decode("utf-8")
    if tag != NORMALIZATION:
        raise CheckpointError(f"unknown normalisation tag {tag!r}")
    (count,) = r.unpack("<I")
    records = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        dtag, rank = r.unpack("<BB")
        if dtag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {dtag}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[dtag]
        arr = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        records.append((name, arr))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")

    dtypes = {a.dtype for _, a in records}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed record dtypes {dtypes}")
    model = Model(config, dtypes.pop().newbyteorder("=") if dtypes else np.float32)
    own = model.state()
    if [n for n, _ in own] != [n for n, _ in records]:
        raise ArchitectureMismatchError("parameter names/order do not match the architecture")
    for (name, dst), (_, src) in zip(own, records):
        if dst.shape != src.shape:
            raise ArchitectureMismatchError(f"{name}: stored shape {src.shape}, "
                                            f"architecture needs {dst.shape}")
        dst[...] = src
    return model, policy


def save_checkpoint(model: Model, policy: ResizePolicy | None, path) -> None:
    data = dumps(model, policy)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, expected: PbbnConfig | None = None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expected)
