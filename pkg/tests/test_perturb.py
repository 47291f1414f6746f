import numpy as np
import pytest

from ntf import perturb as P
from ntf.data import natural_image
from ntf.errors import ArgumentError
from ntf.tensor import Rng


@pytest.fixture
def img(rng):
    return rng.uniform(size=(3, 32, 32)).astype(np.float32)


def test_blur_identity_and_constant(img):
    assert P.gaussian_blur(img, 0.0) is img
    const = np.full((3, 16, 16), 0.37)
    for sigma in (0.5, 1.0, 2.0):
        np.testing.assert_allclose(P.gaussian_blur(const, sigma), const, atol=1e-12)
        k = P.gaussian_kernel(sigma)
        assert abs(k.sum() - 1.0) <= 1e-12
        assert len(k) == 2 * int(np.ceil(3 * sigma)) + 1


def test_blur_rejects_negative_sigma(img):
    with pytest.raises(ArgumentError):
        P.gaussian_blur(img, -1.0)


def test_blur_reduces_variation(img):
    out = P.gaussian_blur(img, 1.0)
    assert out.dtype == img.dtype
    assert np.abs(np.diff(out, axis=-1)).mean() < np.abs(np.diff(img, axis=-1)).mean()


def test_jpeg_constant_gray_is_exact():
    gray = np.full((3, 16, 16), 128 / 255.0)
    for q in (1, 10, 50, 90, 100):
        np.testing.assert_array_equal(P.jpeg_roundtrip(gray, q), gray)


def test_jpeg_quality_100_error_bound(rng):
    for _ in range(5):
        x = rng.uniform(size=(3, 24, 24))
        err = np.abs(P.jpeg_roundtrip(x, 100) - np.round(x * 255) / 255).max()
        assert err <= 2 / 255 + 1e-12


def test_jpeg_low_quality_is_worse():
    errs = {}
    for q in (10, 90):
        e = []
        for i in range(6):
            x = natural_image(32, Rng(21, (i,)))
            e.append(np.abs(P.jpeg_roundtrip(x, q) - x).mean())
        errs[q] = np.mean(e)
    assert errs[10] > errs[90]


def test_jpeg_non_multiple_of_block(rng):
    x = rng.uniform(size=(3, 13, 10))
    assert P.jpeg_roundtrip(x, 75).shape == x.shape


def test_jpeg_quality_range(img):
    for q in (0, 101):
        with pytest.raises(ArgumentError):
            P.jpeg_roundtrip(img, q)


def test_quality_table_scaling():
    luma, _ = P.quality_tables(50)
    np.testing.assert_array_equal(luma, P.LUMA_QTABLE)
    luma, chroma = P.quality_tables(100)
    assert np.all(luma == 1) and np.all(chroma == 1)


def test_noise_identity_and_determinism(img):
    assert P.add_gaussian_noise(img, 0.0, Rng(0)) is img
    a = P.add_gaussian_noise(img, 0.1, Rng(3))
    np.testing.assert_array_equal(a, P.add_gaussian_noise(img, 0.1, Rng(3)))
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, P.add_gaussian_noise(img, 0.1, Rng(4)))


def test_scale_identity_and_constant(img):
    assert P.rescale(img, 1.0) is img
    const = np.full((3, 32, 32), 0.6, dtype=np.float32)
    for f in (0.75, 0.5, 0.2):
        out = P.rescale(const, f)
        assert out.shape == const.shape
        np.testing.assert_array_equal(out, const)


def test_scale_rejects_bad_factor(img):
    for f in (0.0, -0.5, 1.5):
        with pytest.raises(ArgumentError):
            P.rescale(img, f)


def test_ycbcr_round_trip(rng):
    rgb = rng.uniform(0, 255, size=(3, 4, 4))
    np.testing.assert_allclose(P.ycbcr_to_rgb(P.rgb_to_ycbcr(rgb)), rgb, atol=1e-3)
