"""Manifests, PPM images, augmentation, batch assembly, synthetic corpus."""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DimensionError,
    DuplicatePathError,
    ImageDecodeError,
    ManifestParseError,
    ManifestSchemaError,
    TruncatedImageError,
    UnsupportedDepthError,
)
from .losses import FAKE, REAL, pairing_from_sources
from .perturb import gaussian_blur

LABELS = {"real": REAL, "fake": FAKE}
SPLITS = ("train", "val", "test")
SCHEMA_VERSION = 1


# ---------------------------------------------------------------- manifest


@dataclass
class ImageRecord:
    path: str
    label: str
    family: str
    split: str

    @property
    def label_id(self):
        return LABELS[self.label]


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def select(self, split=None, label=None, family=None):
        return [
            r
            for r in self.records
            if (split is None or r.split == split)
            and (label is None or r.label == label)
            and (family is None or r.family == family)
        ]

    def families(self, split=None):
        seen = []
        for r in self.records:
            if (split is None or r.split == split) and r.family not in seen:
                seen.append(r.family)
        return seen


def load_manifest(path, check_paths=True):
    """Parse a ``path<TAB>label<TAB>family<TAB>split`` manifest.

    Relative paths resolve against the manifest's directory. Lines starting
    with ``#`` are comments, except ``#schema_version=N``.
    """
    root = os.path.dirname(os.path.abspath(path))
    records, seen = [], set()
    version = SCHEMA_VERSION
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.startswith("#"):
                m = re.fullmatch(r"#\s*schema_version\s*=\s*(\d+)\s*", line)
                if m:
                    version = int(m.group(1))
                    if version != SCHEMA_VERSION:
                        raise ManifestSchemaError(lineno, f"unsupported schema version {version}")
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestParseError(lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            rel, label, family, split = parts
            if not rel:
                raise ManifestParseError(lineno, "empty path")
            if label not in LABELS:
                raise ManifestSchemaError(lineno, f"unknown label {label!r}")
            if split not in SPLITS:
                raise ManifestSchemaError(lineno, f"unknown split {split!r}")
            if not family:
                raise ManifestSchemaError(lineno, "empty family")
            full = rel if os.path.isabs(rel) else os.path.normpath(os.path.join(root, rel))
            if full in seen:
                raise DuplicatePathError(lineno, f"duplicate path {rel!r}")
            if check_paths and not os.path.exists(full):
                raise FileNotFoundError(f"line {lineno}: {full} does not exist")
            seen.add(full)
            records.append(ImageRecord(full, label, family, split))
    return Manifest(records, version)


def write_manifest(manifest, path):
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema_version={manifest.schema_version}\n")
        for r in manifest.records:
            rel = os.path.relpath(r.path, root)
            fh.write(f"{rel}\t{r.label}\t{r.family}\t{r.split}\n")
    return path


# ------------------------------------------------------------------ images


def _ppm_header(data):
    """Return (width, height, maxval, payload offset) of a binary PPM."""
    if data[:2] != b"P6":
        raise BadMagicError(f"not a binary PPM (magic {data[:2]!r})")
    pos, tokens = 2, []
    n = len(data)
    while len(tokens) < 3:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("PPM header ends early")
        tok = data[start:pos]
        if not tok.isdigit():
            raise ImageDecodeError(f"bad PPM header token {tok!r}")
        tokens.append(int(tok))
    if pos >= n:
        raise TruncatedImageError("PPM header ends early")
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise ImageDecodeError("PPM with empty raster")
    if maxval > 255 or maxval < 1:
        raise UnsupportedDepthError(f"maxval {maxval} (only 8-bit PPM is supported)")
    return width, height, maxval, pos


def decode_ppm(data):
    width, height, maxval, off = _ppm_header(data)
    need = width * height * 3
    raster = data[off : off + need]
    if len(raster) < need:
        raise TruncatedImageError(f"PPM raster has {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)


def read_image(path):
    """Decode a P6 PPM (or PNG, if Pillow is installed) to 3×H×W floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    return decode_ppm(data)


def _read_png(path):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageDecodeError("PNG support needs Pillow (pip install artifact[png])") from exc
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L"):
            raise UnsupportedDepthError(f"PNG mode {im.mode} not supported")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def to_bytes8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img):
    arr = to_bytes8(img).transpose(1, 2, 0)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))
    return path


# ------------------------------------------------------------ augmentation


@dataclass
class AugmentConfig:
    crop_size: int = 32
    flip_prob: float = 0.5
    brightness_jitter: float = 0.2
    views_per_image: int = 2

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.brightness_jitter < 0:
            raise ValueError("brightness_jitter must be >= 0")
        if self.views_per_image != 2:
            raise ValueError("exactly two views per image are supported")


def augment(img, cfg, rng):
    """Random crop, horizontal flip, per-channel brightness scaling, clamp to [0, 1]."""
    _, H, W = img.shape
    S = cfg.crop_size
    if H < S or W < S:
        raise DimensionError(f"image {H}×{W} smaller than crop {S}")
    top = int(rng.integers(0, H - S + 1))
    left = int(rng.integers(0, W - S + 1))
    out = img[:, top : top + S, left : left + S]
    if rng.uniform() < cfg.flip_prob:
        out = out[:, :, ::-1]
    j = cfg.brightness_jitter
    if j:
        gain = rng.uniform(1 - j, 1 + j, size=3).astype(img.dtype)
        out = out * gain[:, None, None]
    return np.clip(out, 0, 1)


def center_crop(img, size):
    _, H, W = img.shape
    if H < size or W < size:
        raise DimensionError(f"image {H}×{W} smaller than crop {size}")
    top, left = (H - size) // 2, (W - size) // 2
    return img[:, top : top + size, left : left + size]


class ImageSet:
    """Decoded images for a list of records, held in memory."""

    def __init__(self, records, images):
        self.records = list(records)
        self.images = list(images)
        self.labels = np.array([r.label_id for r in self.records], dtype=np.int64)
        self.families = [r.family for r in self.records]

    @classmethod
    def load(cls, records, workers=1):
        records = list(records)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                images = list(pool.map(read_image, (r.path for r in records)))
        else:
            images = [read_image(r.path) for r in records]
        return cls(records, images)

    def __len__(self):
        return len(self.records)

    def indices(self, label=None, family=None):
        return [
            i
            for i, r in enumerate(self.records)
            if (label is None or r.label_id == label) and (family is None or r.family == family)
        ]

    def stack(self, indices=None, size=None):
        idx = range(len(self)) if indices is None else indices
        imgs = [self.images[i] if size is None else center_crop(self.images[i], size) for i in idx]
        return np.stack(imgs) if imgs else np.zeros((0, 3, size or 0, size or 0), np.float32)


@dataclass
class Batch:
    x: np.ndarray  # (2N, 3, S, S)
    source_id: np.ndarray
    label: np.ndarray
    pairing: np.ndarray


def _views(images, picks, cfg, rng, start=0):
    xs = []
    for s, idx in enumerate(picks, start=start):
        img = images.images[idx]
        xs.append(augment(img, cfg, rng.substream(0, s, 0)))
        xs.append(augment(img, cfg, rng.substream(0, s, 1)))
    return xs


def make_stage1_batch(images, N, cfg, rng, indices=None):
    """N real sources × two views; rows 2i and 2i+1 come from source i.

    ``indices`` (positions in ``images``) fixes the sources; otherwise N
    distinct real images are drawn without replacement.
    """
    if N < 2:
        raise DataError("stage-1 batches need N >= 2")
    pool = images.indices(label=REAL)
    if indices is None:
        if len(pool) < N:
            raise DataError(f"need {N} real images, have {len(pool)}")
        indices = [pool[i] for i in rng.substream(1).choice(len(pool), N, replace=False)]
    elif any(images.labels[i] != REAL for i in indices):
        raise DataError("stage-1 batches may only contain real images")
    x = np.stack(_views(images, indices, cfg, rng))
    sid = np.repeat(np.asarray(indices, dtype=np.int64), 2)
    return Batch(x, sid, np.zeros(len(sid), dtype=np.int64), pairing_from_sources(sid))


def make_stage2_batch(images, N_real, N_fake, cfg, rng, real_idx=None, fake_idx=None):
    """Two views each of N_real real and N_fake fake images (real rows first)."""
    reals, fakes = images.indices(label=REAL), images.indices(label=FAKE)
    if not reals or not fakes:
        raise DataError("stage-2 batches need both real and fake training images")
    if real_idx is None:
        if len(reals) < N_real or len(fakes) < N_fake:
            raise DataError("not enough images for the requested stage-2 batch")
        real_idx = [reals[i] for i in rng.substream(1, 0).choice(len(reals), N_real, replace=False)]
        fake_idx = [fakes[i] for i in rng.substream(1, 1).choice(len(fakes), N_fake, replace=False)]
    picks = list(real_idx) + list(fake_idx)
    x = np.stack(_views(images, picks, cfg, rng))
    sid = np.repeat(np.asarray(picks, dtype=np.int64), 2)
    label = np.repeat(images.labels[picks], 2)
    return Batch(x, sid, label, pairing_from_sources(sid))


# -------------------------------------------------------- synthetic corpus

FAMILIES = ("natural", "fakeA", "fakeB", "fakeC")
TRAIN_FAMILIES = ("natural", "fakeA")
SPECTRAL_ALPHA = 2.0
CHECKER_AMPLITUDE = 0.08
PEAK_AMPLITUDE = 0.06
BLUR_SIGMA = 1.0
UNSHARP_AMOUNT = 1.5


def _power_law_field(size, rng, alpha):
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    amp = np.zeros_like(f)
    amp[f > 0] = f[f > 0] ** (-alpha / 2.0)
    noise = rng.normal(size=(size, size))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * amp))
    return (field - field.mean()) / field.std()


def natural_image(size, rng, alpha=SPECTRAL_ALPHA):
    """Power-law (1/f^alpha power) texture with a soft illumination ramp."""
    lum = _power_law_field(size, rng.substream(0), alpha)
    contrast = rng.uniform(0.10, 0.18)
    tint = rng.uniform(-0.06, 0.06, size=3)
    chan = []
    for c in range(3):
        chroma = _power_law_field(size, rng.substream(1 + c), alpha)
        chan.append(0.5 + tint[c] + contrast * (lum + 0.3 * chroma))
    img = np.stack(chan)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = rng.uniform(0.0, 0.12) * (np.cos(theta) * xx + np.sin(theta) * yy)
    return np.clip(img + ramp[None], 0, 1)


def checkerboard(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.where((xx + yy) % 2 == 0, 1.0, -1.0)


def peak_frequencies(size):
    return ((size // 4, size // 8), (-(size // 8), size // 4))


def make_fake(family, base, rng):
    size = base.shape[-1]
    if family == "fakeA":
        out = base + CHECKER_AMPLITUDE * checkerboard(size)[None]
    elif family == "fakeB":
        yy, xx = np.mgrid[0:size, 0:size]
        pattern = np.zeros((size, size))
        for u, v in peak_frequencies(size):
            phase = rng.uniform(0, 2 * np.pi)
            pattern += np.cos(2 * np.pi * (u * xx + v * yy) / size + phase)
        out = base + PEAK_AMPLITUDE * pattern[None]
    elif family == "fakeC":
        soft = gaussian_blur(base, BLUR_SIGMA)
        out = soft + UNSHARP_AMOUNT * (soft - gaussian_blur(soft, BLUR_SIGMA))
    else:
        raise ValueError(f"unknown fake family {family!r}")
    return np.clip(out, 0, 1)


def synth_image(family, size, rng):
    base = natural_image(size, rng.substream(0))
    if family == "natural":
        return base
    return make_fake(family, base, rng.substream(1))


def gen_synthetic_corpus(out_dir, n_per_family, size, rng, n_train_real=None, n_train_fake=None):
    """Write a four-family PPM corpus plus ``manifest.tsv`` under ``out_dir``.

    The test split holds ``n_per_family`` images of every family. The train
    split holds only natural (default 4 × n_per_family) and fakeA
    (default 2 × n_per_family) images.
    """
    if size < 32 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 32, got {size}")
    n_train_real = 4 * n_per_family if n_train_real is None else n_train_real
    n_train_fake = 2 * n_per_family if n_train_fake is None else n_train_fake
    plan = []
    for fam_id, fam in enumerate(FAMILIES):
        counts = {"test": n_per_family}
        if fam == "natural":
            counts["train"] = n_train_real
        elif fam in TRAIN_FAMILIES:
            counts["train"] = n_train_fake
        for split_id, split in enumerate(("train", "test")):
            for i in range(counts.get(split, 0)):
                plan.append((fam_id, fam, split_id, split, i))
    os.makedirs(out_dir, exist_ok=True)
    for fam in FAMILIES:
        os.makedirs(os.path.join(out_dir, fam), exist_ok=True)
    records = []
    for fam_id, fam, split_id, split, i in plan:
        img = synth_image(fam, size, rng.substream(fam_id, split_id, i))
        path = os.path.join(out_dir, fam, f"{split}_{i:05d}.ppm")
        write_ppm(path, img)
        label = "real" if fam == "natural" else "fake"
        records.append(ImageRecord(os.path.abspath(path), label, fam, split))
    manifest = Manifest(records)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest
