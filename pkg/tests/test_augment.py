import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedssl.augment import AugmentConfig, augment_once, resized_crop, two_view_batch, two_views


def image(seed=0, channels=1):
    return np.random.default_rng(seed).uniform(size=(channels, 28, 28))


def test_disabled_pipeline_is_identity():
    img = image()
    a, b = two_views(img, AugmentConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(a, img) and np.array_equal(b, img)


def test_same_seed_bit_identical():
    img = image(1)
    a = two_views(img, AugmentConfig(), np.random.default_rng(5))
    b = two_views(img, AugmentConfig(), np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], a[1])


def test_full_crop_with_forced_flip_mirrors():
    img = image(2)
    cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), flip_prob=1.0, intensity=False, noise=False)
    out = augment_once(img, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out, img[..., ::-1], atol=1e-12)


def test_resized_crop_full_window_is_exact():
    img = image(3)
    np.testing.assert_allclose(resized_crop(img, 0.0, 0.0, 28.0), img, atol=1e-12)


def test_resized_crop_matches_pointwise_bilinear():
    img = image(4)[0]
    top, left, side = 3.3, 5.7, 17.2
    out = resized_crop(img, top, left, side)
    for i in (0, 9, 27):
        for j in (0, 13, 27):
            y = top + i * (side - 1) / 27
            x = left + j * (side - 1) / 27
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            fy, fx = y - y0, x - x0
            want = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
                    + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
            assert abs(out[i, j] - want) < 1e-9


def test_flip_frequency():
    cfg = AugmentConfig(crop=False, intensity=False, noise=False)
    img = np.zeros((1, 28, 28))
    img[..., 0] = 1.0
    rng = np.random.default_rng(11)
    flips = sum(augment_once(img, cfg, rng)[0, 0, -1] == 1.0 for _ in range(10_000))
    assert abs(flips / 10_000 - 0.5) < 0.02


def test_batch_shapes_and_channels():
    imgs = np.stack([image(i, channels=3) for i in range(4)])
    a, b = two_view_batch(imgs, AugmentConfig(), np.random.default_rng(0))
    assert a.shape == b.shape == (4, 3, 28, 28)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_outputs_stay_in_unit_range(seed, level):
    img = np.clip(image(seed % 1000) * 0.2 + level, 0, 1)
    cfg = AugmentConfig(intensity_jitter=0.5, gaussian_noise_std=0.3)
    a, b = two_views(img, cfg, np.random.default_rng(seed))
    for v in (a, b):
        assert v.shape == (1, 28, 28)
        assert v.min() >= 0.0 and v.max() <= 1.0
