"""Sequence manifests, a synthetic blink-sequence generator, and array loading.

On-disk layout: a UTF-8 CSV manifest with columns ``dir,label,eye_side``
(header optional, ``dir`` relative to the manifest's folder), where each
``dir`` holds exactly ``frame_count`` PGM/PPM frames whose lexicographic
order is their temporal order.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .resample import Image, ResizePolicy, preprocess_array, read_pnm, write_pnm

FRAME_SUFFIXES = (".pgm", ".ppm")
_LABELS = {"1": 1, "blink": 1, "0": 0, "nonblink": 0, "non-blink": 0}
_SIDES = ("left", "right")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceSample:
    frame_paths: tuple[Path, ...]
    label: int  # 1 = blink
    eye_side: str
    source_id: str

    def load_frames(self) -> list[Image]:
        frames = [read_pnm(p) for p in self.frame_paths]
        if len({f.channels for f in frames}) > 1:
            raise ManifestError(f"{self.source_id}: frames mix grey and colour images")
        return frames


@dataclass
class Manifest:
    path: Path
    root: Path
    frame_count: int
    samples: list[SequenceSample]

    def __len__(self):
        return len(self.samples)

    def tally(self) -> Counter:
        """Sample counts keyed by ``(eye_side, "blink" | "nonblink")``."""
        return Counter((s.eye_side, "blink" if s.label else "nonblink") for s in self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_manifest(path, frame_count: int = 13) -> Manifest:
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) != 3:
                raise ManifestError(f"{where}: expected 3 fields (dir,label,eye_side), got {len(row)}")
            d, label, side = (c.strip() for c in row)
            if lineno == 1 and label.lower() == "label":
                continue
            if label.lower() not in _LABELS:
                raise ManifestError(f"{where}: bad label token {label!r}")
            if side.lower() not in _SIDES:
                raise ManifestError(f"{where}: bad eye side {side!r}")
            seq_dir = root / d
            if not seq_dir.is_dir():
                raise ManifestError(f"{where}: missing sequence directory {seq_dir}")
            frames = frame_files(seq_dir)
            if len(frames) != frame_count:
                raise ManifestError(f"{where}: {seq_dir} holds {len(frames)} frames, "
                                    f"expected {frame_count}")
            samples.append(SequenceSample(tuple(frames), _LABELS[label.lower()], side.lower(), d))
    return Manifest(path, root, frame_count, samples)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dir", "label", "eye_side"])
        w.writerows(rows)


def load_arrays(manifest: Manifest, policy: ResizePolicy, dtype=np.float32):
    """Preprocess every sample into ``X [N, H, W, T, C]`` and labels ``y [N]``."""
    xs = []
    channels = None
    for s in manifest.samples:
        frames = s.load_frames()
        if channels is None:
            channels = frames[0].channels
        elif frames[0].channels != channels:
            raise ManifestError(f"{s.source_id}: {frames[0].channels} channels, dataset uses {channels}")
        xs.append(np.stack([preprocess_array(f, policy, dtype) for f in frames], axis=2))
    return np.stack(xs), manifest.labels()


# -- synthetic data ---------------------------------------------------------------

NOISE_SIGMA = 4.0
SIZE_RANGE = (32, 160)


def _aperture_profile(rng, frame_count: int, blink: bool) -> np.ndarray:
    if not blink:
        return np.clip(1.0 - np.abs(rng.normal(0.0, 0.03, frame_count)), 0.85, 1.0)
    ap = np.ones(frame_count)
    mid = frame_count // 2
    dur = int(rng.integers(3, 6))  # 3-5 frames, fully closed at the middle frame
    half = dur // 2
    for f in range(mid - half, mid - half + dur):
        if 0 <= f < frame_count:
            ap[f] = abs(f - mid) / (half + 1)
    return ap


def _render(size, aperture, eye, gaze, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = eye["cx"] * size, eye["cy"] * size
    ax, ay = eye["ax"] * size, eye["ay"] * size * aperture
    img = np.full((size, size), eye["skin"])
    if ay > 0:
        inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
        img[inside] = eye["sclera"]
        px, py = cx + gaze[0] * size, cy + gaze[1] * size
        pupil = inside & ((xx - px) ** 2 + (yy - py) ** 2 <= (eye["r"] * size) ** 2)
        img[pupil] = eye["pupil"]
    img += rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_generate(n: int, seed: int, out_dir, frame_count: int = 13) -> Manifest:
    """Write ``n`` grey-level eye sequences plus ``manifest.csv`` under ``out_dir``.

    Blink samples close and reopen the eye aperture over 3-5 middle frames;
    non-blink samples keep it open with small jitter. Each sample has its own
    square resolution in [32, 160]. ``ceil(n / 2)`` samples are blinks.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_blink = math.ceil(n / 2)
    labels = rng.permutation(np.r_[np.ones(n_blink, int), np.zeros(n - n_blink, int)])
    width = max(2, len(str(frame_count - 1)))
    rows = []
    for i, label in enumerate(labels):
        size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
        eye = {
            "skin": rng.uniform(90, 100),
            "sclera": rng.uniform(215, 235),
            "pupil": rng.uniform(25, 45),
            "cx": 0.5 + rng.uniform(-0.04, 0.04),
            "cy": 0.5 + rng.uniform(-0.04, 0.04),
            "ax": rng.uniform(0.36, 0.40),
            "ay": rng.uniform(0.18, 0.21),
            "r": rng.uniform(0.11, 0.13),
        }
        aperture = _aperture_profile(rng, frame_count, bool(label))
        name = f"seq_{i:04d}"
        seq = out / name
        seq.mkdir(exist_ok=True)
        for f in range(frame_count):
            gaze = rng.uniform(-0.03, 0.03, 2)
            write_pnm(seq / f"frame_{f:0{width}d}.pgm", Image(_render(size, aperture[f], eye, gaze, rng)))
        rows.append((name, "blink" if label else "nonblink", _SIDES[i % 2]))
    write_manifest(out / "manifest.csv", rows)
    return load_manifest(out / "manifest.csv", frame_count)
