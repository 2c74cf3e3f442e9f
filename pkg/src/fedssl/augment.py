"""Seeded two-view augmentation for single-channel or multi-channel 28x28 images.

Per view, in order: square random resized crop (bilinear, corner-aligned, back
to the input size), horizontal flip, multiplicative intensity jitter, additive
Gaussian noise, clamp to [0, 1]. Random draws happen only for enabled
transforms, in that same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    intensity_jitter: float = 0.2
    gaussian_noise_std: float = 0.02
    crop: bool = True
    flip: bool = True
    intensity: bool = True
    noise: bool = True

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop=False, flip=False, intensity=False, noise=False)


def resized_crop(image: np.ndarray, top: float, left: float, side: float) -> np.ndarray:
    """Bilinearly resample the square window ``[top, top+side-1] x [left, left+side-1]``.

    Output pixel ``i`` samples source coordinate ``top + i * (side - 1) / (size - 1)``,
    so a full-size window reproduces the input exactly.
    """
    size = image.shape[-1]
    steps = np.arange(size) * ((side - 1.0) / (size - 1))
    ys = top + steps
    xs = left + steps
    y0 = np.clip(np.floor(ys).astype(int), 0, size - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, size - 1)
    y1 = np.minimum(y0 + 1, size - 1)
    x1 = np.minimum(x0 + 1, size - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = image[..., y0[:, None], x0[None, :]]
    b = image[..., y0[:, None], x1[None, :]]
    c = image[..., y1[:, None], x0[None, :]]
    d = image[..., y1[:, None], x1[None, :]]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def augment_once(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    size = image.shape[-1]
    out = np.array(image, dtype=np.float64)
    if cfg.crop:
        lo, hi = cfg.crop_scale_range
        area = rng.uniform(lo, hi)
        side = np.sqrt(area) * size
        top = rng.uniform(0.0, size - side)
        left = rng.uniform(0.0, size - side)
        out = resized_crop(out, top, left, side)
    if cfg.flip and rng.random() < cfg.flip_prob:
        out = out[..., ::-1]
    if cfg.intensity:
        out = out * rng.uniform(1.0 - cfg.intensity_jitter, 1.0 + cfg.intensity_jitter)
    if cfg.noise:
        out = out + rng.normal(0.0, cfg.gaussian_noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def two_views(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return augment_once(image, cfg, rng), augment_once(image, cfg, rng)


def two_view_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply :func:`two_views` to each image of a B x C x H x W batch."""
    first = np.empty(images.shape, dtype=np.float64)
    second = np.empty(images.shape, dtype=np.float64)
    for i, img in enumerate(images):
        first[i], second[i] = two_views(img, cfg, rng)
    return first, second
