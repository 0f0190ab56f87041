"""Image decode/resize/normalize plus the synthetic vessel dataset generator.

Images are float arrays of shape (3, H, W). Decoded values live in [0, 1];
normalization maps them to (value - mean) / std per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .raster import Mask

# Conventional ImageNet statistics; configurable, not baked into the ops.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive, got {self.std}")


def decode_image(path) -> np.ndarray:
    """Read an 8-bit RGB image file to a (3, H, W) float64 array in [0, 1]."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DataError(f"image {path} must be 8-bit RGB, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.uint8)
    return (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)


def save_image(img: np.ndarray, path) -> None:
    """Write a (3, H, W) array in [0, 1] as an 8-bit RGB PNG (round(v * 255))."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {img.shape}")
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _axis_weights(in_size: int, out_size: int):
    """Half-pixel-center bilinear gather indices and weights for one axis.

    Source coordinate of output index o is (o + 0.5) * in/out - 0.5, clamped
    to the borders.
    """
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    w_hi = src - lo
    return lo, hi, 1.0 - w_hi, w_hi


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a (C, H, W) array, half-pixel convention."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dimensions must be positive, got {out_h}x{out_w}")
    c, in_h, in_w = img.shape
    r_lo, r_hi, r_w0, r_w1 = _axis_weights(in_h, out_h)
    c_lo, c_hi, c_w0, c_w1 = _axis_weights(in_w, out_w)
    rows = img[:, r_lo, :] * r_w0[None, :, None] + img[:, r_hi, :] * r_w1[None, :, None]
    return rows[:, :, c_lo] * c_w0[None, None, :] + rows[:, :, c_hi] * c_w1[None, None, :]


def normalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=img.dtype).reshape(3, 1, 1)
    return (img - mean) / std


def denormalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=img.dtype).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=img.dtype).reshape(3, 1, 1)
    return img * std + mean


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Coarse random grid blown up bilinearly: cheap low-frequency texture."""
    coarse = rng.uniform(-1.0, 1.0, size=(1, cells, cells))
    return resize_bilinear(coarse, h, w)[0]


def _draw_tube(rng: np.random.Generator, mask: np.ndarray) -> None:
    """Stamp one random-walk tube (thickness 2-6 px) into the mask in place."""
    h, w = mask.shape
    thickness = rng.integers(2, 7)
    radius = thickness / 2.0
    steps = int(rng.integers(h, 2 * h))
    y = rng.uniform(0.15 * h, 0.85 * h)
    x = rng.uniform(0.15 * w, 0.85 * w)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    # Precompute a circular stamp footprint for this thickness.
    r_int = int(np.ceil(radius))
    dy, dx = np.mgrid[-r_int : r_int + 1, -r_int : r_int + 1]
    stamp = (dy * dy + dx * dx) <= radius * radius
    for _ in range(steps):
        heading += rng.normal(0.0, 0.35)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (0 <= y < h and 0 <= x < w):
            break
        cy, cx = int(y), int(x)
        y_lo, y_hi = max(0, cy - r_int), min(h, cy + r_int + 1)
        x_lo, x_hi = max(0, cx - r_int), min(w, cx + r_int + 1)
        window = stamp[
            y_lo - (cy - r_int) : y_hi - (cy - r_int),
            x_lo - (cx - r_int) : x_hi - (cx - r_int),
        ]
        mask[y_lo:y_hi, x_lo:x_hi] |= window.astype(np.uint8)


def _synth_one(seed: int, index: int, h: int, w: int) -> tuple[np.ndarray, Mask]:
    for attempt in range(64):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index, attempt))))
        mask = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 5))):
            _draw_tube(rng, mask)
        frac = float(mask.sum()) / (h * w)
        if not (0.01 <= frac <= 0.25):
            continue
        base = 0.72 + 0.06 * _smooth_noise(rng, h, w)
        tint = rng.uniform(-0.04, 0.04, size=(3, 1, 1))
        img = np.clip(base[None, :, :] + tint, 0.0, 1.0)
        # Vessels are drawn darker than any background texture excursion.
        img = np.where(mask[None, :, :] == 1, np.clip(img - 0.35, 0.0, 1.0), img)
        return img, mask
    raise RuntimeError(
        f"could not meet the foreground-fraction bound for sample {index} (seed {seed})"
    )


def synth_vessels(seed: int, count: int, h: int, w: int) -> list[tuple[np.ndarray, Mask]]:
    """Generate ``count`` synthetic (image, mask) pairs, deterministic per
    (seed, index). Each mask's foreground fraction lies in [0.01, 0.25]."""
    if h < 32 or w < 32:
        raise ValueError(f"synthetic tiles must be at least 32x32, got {h}x{w}")
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    return [_synth_one(seed, i, h, w) for i in range(count)]
