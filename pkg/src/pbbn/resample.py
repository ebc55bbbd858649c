"""Eye-crop resampling: five interpolation methods, target-size choice, normalisation.

Coordinates follow the half-pixel-centre convention: destination pixel ``d``
samples the source at ``(d + 0.5) * scale - 0.5`` with ``scale = src / dst``.
Borders replicate the edge pixel. Every method is separable, so a resize is
one weight matrix per axis applied in float64, then rounded once.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import TensorND

BICUBIC_A = -0.75
LANCZOS_RADIUS = 4
MIN_TARGET = 8
NORMALIZATION = "div255"


class InterpMethod(enum.Enum):
    NEAREST = "nn"
    BILINEAR = "bilinear"
    AREA = "area"
    BICUBIC = "bicubic"
    LANCZOS4 = "lanczos4"

    @classmethod
    def parse(cls, token: str) -> "InterpMethod":
        token = token.strip().lower()
        aliases = {"nearest": "nn", "bl": "bilinear", "linear": "bilinear", "bc": "bicubic",
                   "cubic": "bicubic", "lanczos": "lanczos4"}
        token = aliases.get(token, token)
        for m in cls:
            if m.value == token:
                return m
        raise ValueError(f"unknown interpolation method {token!r}; "
                         f"choose from {', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class Image:
    """8-bit image; ``pixels`` has shape ``(height, width, channels)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image extents must be >= 1")
        if px.dtype != np.uint8:
            raise TypeError(f"pixels must be uint8, got {px.dtype}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class ResizePolicy:
    target_h: int
    target_w: int
    up: InterpMethod = InterpMethod.BICUBIC
    down: InterpMethod = InterpMethod.BILINEAR

    def __post_init__(self):
        if self.target_h < MIN_TARGET or self.target_w < MIN_TARGET:
            raise ValueError(f"target size must be >= {MIN_TARGET} in both axes, "
                             f"got {self.target_h}x{self.target_w}")


def _cubic(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _lanczos(t: np.ndarray, r: int = LANCZOS_RADIUS) -> np.ndarray:
    return np.where(np.abs(t) < r, np.sinc(t) * np.sinc(t / r), 0.0)


def axis_weights(n_src: int, n_dst: int, method: InterpMethod) -> np.ndarray:
    """Dense ``(n_dst, n_src)`` resampling matrix for one axis."""
    scale = n_src / n_dst
    m = np.zeros((n_dst, n_src))
    dst = np.arange(n_dst)
    rows = dst[:, None]

    if method is InterpMethod.AREA:
        # overlap of [d*s, (d+1)*s) with each source cell [i, i+1)
        lo = dst * scale
        hi = lo + scale
        src = np.arange(n_src)
        overlap = np.minimum(hi[:, None], src[None, :] + 1) - np.maximum(lo[:, None], src[None, :])
        return np.clip(overlap, 0.0, None) / scale

    centre = (dst + 0.5) * scale - 0.5
    if method is InterpMethod.NEAREST:
        idx = np.minimum(np.floor((dst + 0.5) * scale).astype(int), n_src - 1)
        m[dst, idx] = 1.0
        return m

    base = np.floor(centre).astype(int)
    if method is InterpMethod.BILINEAR:
        offsets = np.arange(0, 2)
    elif method is InterpMethod.BICUBIC:
        offsets = np.arange(-1, 3)
    elif method is InterpMethod.LANCZOS4:
        offsets = np.arange(-LANCZOS_RADIUS + 1, LANCZOS_RADIUS + 1)
    else:
        raise ValueError(f"unsupported method {method}")

    taps = base[:, None] + offsets[None, :]
    dist = centre[:, None] - taps
    if method is InterpMethod.BILINEAR:
        w = np.clip(1.0 - np.abs(dist), 0.0, None)
    elif method is InterpMethod.BICUBIC:
        w = _cubic(dist)
    else:
        w = _lanczos(dist)
        w = w / w.sum(axis=1, keepdims=True)
    np.add.at(m, (np.broadcast_to(rows, taps.shape), np.clip(taps, 0, n_src - 1)), w)
    return m


def resize_float(pixels: np.ndarray, target_h: int, target_w: int,
                 method: InterpMethod) -> np.ndarray:
    """Unrounded float64 resample of an ``(h, w, c)`` array."""
    wh = axis_weights(pixels.shape[0], target_h, method)
    ww = axis_weights(pixels.shape[1], target_w, method)
    tmp = np.einsum("ah,hwc->awc", wh, pixels.astype(np.float64))
    return np.einsum("bw,awc->abc", ww, tmp)


def resize(img: Image, target_h: int, target_w: int, method: InterpMethod) -> Image:
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target extents must be >= 1, got {target_h}x{target_w}")
    out = resize_float(img.pixels, target_h, target_w, method)
    return Image(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def choose_target_size(sizes: Sequence[tuple[int, int]]) -> tuple[int, int]:
    """Mean height and mean width, rounded half up and floored at 8."""
    sizes = list(sizes)
    if not sizes:
        raise ValueError("cannot choose a target size from an empty list")
    mh = sum(h for h, _ in sizes) / len(sizes)
    mw = sum(w for _, w in sizes) / len(sizes)
    return max(MIN_TARGET, math.floor(mh + 0.5)), max(MIN_TARGET, math.floor(mw + 0.5))


def select_method(img: Image, policy: ResizePolicy) -> InterpMethod | None:
    """Method ``preprocess`` would use, or ``None`` when no resize is needed."""
    if (img.height, img.width) == (policy.target_h, policy.target_w):
        return None
    if img.height * img.width < policy.target_h * policy.target_w:
        return policy.up
    return policy.down


def preprocess_array(img: Image, policy: ResizePolicy, dtype=np.float32) -> np.ndarray:
    method = select_method(img, policy)
    if method is not None:
        img = resize(img, policy.target_h, policy.target_w, method)
    dtype = np.dtype(dtype)
    return img.pixels.astype(dtype) / dtype.type(255)


def preprocess(img: Image, policy: ResizePolicy) -> TensorND:
    """Resize to the policy's target (up- or down-sampling by area) and scale to [0, 1]."""
    return TensorND(preprocess_array(img, policy))


# -- binary PGM (P5) / PPM (P6) ------------------------------------------------

def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    out, pos = [], 2
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_pnm(path) -> Image:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    (w, h, maxval), offset = _tokens(data, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * c, offset=offset)
    return Image(raster.reshape(h, w, c).copy())


def write_pnm(path, img: Image) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, img.width, img.height))
        fh.write(img.pixels.tobytes())
