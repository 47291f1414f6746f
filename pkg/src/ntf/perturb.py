"""Image perturbations used by the robustness sweep.

Images are channel-first float arrays in [0, 1]. Every transform is the
identity at its neutral severity (sigma=0, factor=1).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ArgumentError

# Baseline JPEG quantization tables (ITU T.81 Annex K), row-major.
LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_QTABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def gaussian_kernel(sigma):
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img, k, axis):
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    n = img.shape[axis]
    for t, w in enumerate(k):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(t, t + n)
        out += w * padded[tuple(sl)]
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding per channel."""
    if sigma < 0:
        raise ArgumentError("sigma must be >= 0")
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma)
    out = _convolve_axis(_convolve_axis(np.asarray(img, dtype=np.float64), k, -1), k, -2)
    return out.astype(np.asarray(img).dtype, copy=False)


def add_gaussian_noise(img, sigma, rng):
    if sigma < 0:
        raise ArgumentError("sigma must be >= 0")
    if sigma == 0:
        return img
    noisy = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype, copy=False)


def _resize_axis(img, n_out, axis):
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    # half-pixel centres
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = n_out
    return a + w.reshape(shape) * (b - a)


def bilinear_resize(img, height, width):
    out = _resize_axis(np.asarray(img, dtype=np.float64), height, -2)
    return _resize_axis(out, width, -1)


def rescale(img, factor):
    """Bilinear downscale by ``factor`` then bilinear upscale back to the input size."""
    if not 0 < factor <= 1:
        raise ArgumentError("scale factor must be in (0, 1]")
    if factor == 1:
        return img
    H, W = img.shape[-2:]
    h = max(1, int(round(H * factor)))
    w = max(1, int(round(W * factor)))
    small = bilinear_resize(img, h, w)
    return bilinear_resize(small, H, W).astype(img.dtype, copy=False)


# -------------------------------------------------------------------- JPEG


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT = _dct_matrix()


def quality_tables(quality):
    if not 1 <= quality <= 100:
        raise ArgumentError("JPEG quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tables = []
    for base in (LUMA_QTABLE, CHROMA_QTABLE):
        q = np.floor((base * scale + 50.0) / 100.0)
        tables.append(np.clip(q, 1, 255))
    return tables


def rgb_to_ycbcr(rgb):
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _blocks(channel):
    H, W = channel.shape
    return channel.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks):
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def jpeg_roundtrip(img, quality):
    """Pixel effect of baseline JPEG at ``quality`` (4:4:4, no entropy coding).

    Output is quantized to 8-bit levels like a decoder would produce.
    """
    luma_q, chroma_q = quality_tables(quality)
    arr = np.asarray(img, dtype=np.float64)
    _, H, W = arr.shape
    ph, pw = (-H) % 8, (-W) % 8
    rgb = np.round(np.clip(arr, 0, 1) * 255.0)
    if ph or pw:
        rgb = np.pad(rgb, ((0, 0), (0, ph), (0, pw)), mode="edge")
    ycc = rgb_to_ycbcr(rgb) - 128.0
    out = np.empty_like(ycc)
    for c in range(3):
        q = luma_q if c == 0 else chroma_q
        blk = _blocks(ycc[c])
        coef = _DCT @ blk @ _DCT.T
        coef = np.round(coef / q) * q
        out[c] = _unblocks(_DCT.T @ coef @ _DCT)
    rgb_out = np.clip(np.round(ycbcr_to_rgb(out + 128.0)), 0, 255)[:, :H, :W]
    return (rgb_out / 255.0).astype(np.asarray(img).dtype, copy=False)
