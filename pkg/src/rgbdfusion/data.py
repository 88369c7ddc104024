"""Deterministic synthetic RGB-D scenes.

Scenes are stacks of rectangles and disks over a flat background, composited
near-over-far. The class palette is built so that labels are only fully
recoverable from the joint modalities: one class pair shares an identical RGB
color and differs only in depth band, another pair shares a depth band and
differs only in color.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (BadMagicError, BadVersionError, TruncatedFileError,
                     read_tensor_stream, resize_bilinear, write_tensor_stream,
                     _read_exact)

__all__ = [
    "Sample",
    "SceneSpec",
    "AugmentPolicy",
    "generate_sample",
    "augment_sample",
    "write_sample",
    "read_sample",
    "generate_corpus",
    "read_manifest",
    "IGNORE_INDEX",
]

IGNORE_INDEX = 255

SAMPLE_MAGIC = b"ASMP"
SAMPLE_VERSION = 1


@dataclass
class Sample:
    rgb: np.ndarray    # (3,H,W) float64 in [0,1]
    depth: np.ndarray  # (1,H,W) float64 in [0,1]
    labels: np.ndarray  # (H,W) uint8, class ids or 255

    def __post_init__(self):
        if self.rgb.shape[1:] != self.depth.shape[1:] or self.rgb.shape[1:] != self.labels.shape:
            raise ValueError("sample tensors must be spatially aligned")


# class id -> (rgb color, depth band). Classes 1 and 2 share a color and are
# separated only by depth; classes 3 and 4 share a depth band and are
# separated only by color; class 5 is unambiguous either way.
_PALETTE = {
    1: ((0.85, 0.20, 0.20), (0.15, 0.28)),
    2: ((0.85, 0.20, 0.20), (0.45, 0.58)),
    3: ((0.20, 0.75, 0.25), (0.62, 0.72)),
    4: ((0.25, 0.35, 0.85), (0.62, 0.72)),
    5: ((0.90, 0.85, 0.20), (0.78, 0.88)),
}
_BACKGROUND_COLOR = (0.45, 0.45, 0.45)
_BACKGROUND_DEPTH = 0.95


@dataclass
class SceneSpec:
    num_classes: int = 6
    height: int = 64
    width: int = 64
    min_shapes: int = 3
    max_shapes: int = 7
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.num_classes != 6:
            raise ValueError("the ambiguity palette is defined for 6 classes")
        if self.max_shapes < self.min_shapes:
            raise ValueError("max_shapes must be >= min_shapes")


def class_depth_band(class_id):
    return _PALETTE[class_id][1]


def generate_sample(seed, spec: SceneSpec) -> Sample:
    """Render one scene; deterministic in (seed, spec)."""
    rng = np.random.default_rng([int(seed), 0x5CE] if not isinstance(seed, (list, tuple)) else seed)
    h, w = spec.height, spec.width
    rgb = np.empty((3, h, w))
    for c in range(3):
        rgb[c] = _BACKGROUND_COLOR[c]
    depth = np.full((1, h, w), _BACKGROUND_DEPTH)
    labels = np.zeros((h, w), dtype=np.uint8)

    n = 0 if spec.max_shapes == 0 else rng.integers(spec.min_shapes, spec.max_shapes + 1)
    objects = []
    for _ in range(n):
        cls = int(rng.integers(1, spec.num_classes))
        color, (dlo, dhi) = _PALETTE[cls]
        z = rng.uniform(dlo, dhi)
        kind = rng.choice(["rect", "disk"])
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(0.10, 0.28) * h
        rx = rng.uniform(0.10, 0.28) * w
        objects.append((z, cls, color, kind, cy, cx, ry, rx))

    # far to near so nearer objects overwrite (occlude) farther ones
    yy, xx = np.mgrid[0:h, 0:w]
    for z, cls, color, kind, cy, cx, ry, rx in sorted(objects, key=lambda o: -o[0]):
        if kind == "rect":
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        for c in range(3):
            rgb[c][mask] = color[c]
        depth[0][mask] = z
        labels[mask] = cls

    rgb = np.clip(rgb + rng.normal(0, spec.noise_sigma, rgb.shape), 0.0, 1.0)
    depth = np.clip(depth + rng.normal(0, spec.noise_sigma, depth.shape), 0.0, 1.0)
    return Sample(rgb=rgb, depth=depth, labels=labels)


@dataclass
class AugmentPolicy:
    flip_p: float = 0.5
    scale_range: tuple = (1.0, 2.0)
    crop_size: tuple | None = None  # None: crop back to the input size
    hue_jitter: float = 0.02
    sat_jitter: float = 0.2
    val_jitter: float = 0.2


def _resize_nearest(labels, oh, ow):
    h, w = labels.shape
    yi = np.minimum((np.arange(oh) * h / oh).astype(np.intp), h - 1)
    xi = np.minimum((np.arange(ow) * w / ow).astype(np.intp), w - 1)
    return labels[yi[:, None], xi[None, :]]


def _rgb_to_hsv(rgb):
    # rgb: (3,H,W) in [0,1]
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = (maxc - r) / np.maximum(delta, 1e-12)
        gc = (maxc - g) / np.maximum(delta, 1e-12)
        bc = (maxc - b) / np.maximum(delta, 1e-12)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.intp) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b])


def augment_sample(s: Sample, seed, policy: AugmentPolicy) -> Sample:
    """Flip / scale / crop / HSV-jitter; labels resampled nearest-neighbor."""
    rng = np.random.default_rng([int(seed), 0xA06])
    h, w = s.labels.shape
    crop_h, crop_w = policy.crop_size or (h, w)

    rgb, depth, labels = s.rgb, s.depth, s.labels
    if rng.uniform() < policy.flip_p:
        rgb = rgb[:, :, ::-1]
        depth = depth[:, :, ::-1]
        labels = labels[:, ::-1]

    scale = rng.uniform(*policy.scale_range)
    sh, sw = round(h * scale), round(w * scale)
    if sh < crop_h or sw < crop_w:
        raise ValueError(f"crop {policy.crop_size} larger than scaled size ({sh},{sw})")
    if (sh, sw) != (h, w):
        rgb = resize_bilinear(np.ascontiguousarray(rgb), sh, sw)
        depth = resize_bilinear(np.ascontiguousarray(depth), sh, sw)
        labels = _resize_nearest(labels, sh, sw)

    y0 = int(rng.integers(0, sh - crop_h + 1))
    x0 = int(rng.integers(0, sw - crop_w + 1))
    rgb = np.ascontiguousarray(rgb[:, y0:y0 + crop_h, x0:x0 + crop_w])
    depth = np.ascontiguousarray(depth[:, y0:y0 + crop_h, x0:x0 + crop_w])
    labels = np.ascontiguousarray(labels[y0:y0 + crop_h, x0:x0 + crop_w])

    if policy.hue_jitter or policy.sat_jitter or policy.val_jitter:
        hsv = _rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
        hsv[0] = (hsv[0] + rng.uniform(-policy.hue_jitter, policy.hue_jitter)) % 1.0
        hsv[1] = hsv[1] * (1.0 + rng.uniform(-policy.sat_jitter, policy.sat_jitter))
        hsv[2] = hsv[2] * (1.0 + rng.uniform(-policy.val_jitter, policy.val_jitter))
        rgb = _hsv_to_rgb(np.clip(hsv, 0.0, 1.0))

    return Sample(rgb=np.clip(rgb, 0.0, 1.0), depth=np.clip(depth, 0.0, 1.0),
                  labels=labels.astype(np.uint8))


# -- sample binary format ----------------------------------------------------

def write_sample(path, s: Sample):
    h, w = s.labels.shape
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<BIIH", SAMPLE_VERSION, h, w, 6))
        write_tensor_stream(fh, s.rgb)
        write_tensor_stream(fh, s.depth)
        fh.write(s.labels.astype(np.uint8).tobytes())


def read_sample(path) -> Sample:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "sample magic")
        if magic != SAMPLE_MAGIC:
            raise BadMagicError(f"expected {SAMPLE_MAGIC!r}, got {magic!r}")
        version, h, w, _ = struct.unpack("<BIIH", _read_exact(fh, 11, "sample header"))
        if version != SAMPLE_VERSION:
            raise BadVersionError(f"unsupported sample format version {version}")
        rgb = read_tensor_stream(fh)
        depth = read_tensor_stream(fh)
        raw = _read_exact(fh, h * w, "labels")
        labels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    return Sample(rgb=rgb, depth=depth, labels=labels)


# -- corpus ------------------------------------------------------------------

def generate_corpus(out_dir, spec: SceneSpec, n_train, n_test, base_seed=0):
    """Write samples and a line-delimited manifest (seed, path, split)."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for split, count, offset in (("train", n_train, 0), ("test", n_test, n_train)):
        for i in range(count):
            seed = base_seed + offset + i
            fname = f"{split}_{i:05d}.asmp"
            write_sample(os.path.join(out_dir, fname), generate_sample(seed, spec))
            entries.append((seed, fname, split))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for seed, fname, split in entries:
            fh.write(f"{seed} {fname} {split}\n")
    return entries


def read_manifest(corpus_dir):
    entries = []
    with open(os.path.join(corpus_dir, "manifest.txt")) as fh:
        for line in fh:
            seed, fname, split = line.split()
            entries.append((int(seed), os.path.join(corpus_dir, fname), split))
    return entries
