"""Procedural day/night street-like scenes with dense labels.

A scene is a textured background (class 0) with axis-aligned rectangles of
the other classes painted over it. Each class has a hue and a texture with a
class-specific spatial frequency; colors are jittered per scene so hue alone
is not a reliable cue.

Geometry, palette and texture come from one random stream per (seed, index);
the night style draws a second stream for a smooth multiplicative exposure
field g(x, y) in [0.1, 2.5], applies it with clipping, and adds Gaussian
sensor noise. Day and night renderings of the same (seed, index) therefore
share identical labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

STYLES = ("day", "night")
GAIN_RANGE = (0.1, 2.5)
NOISE_SIGMA = 0.02

# base RGB per class, cycled when there are more classes than entries
_PALETTE = np.array(
    [
        [0.35, 0.35, 0.38],  # background: asphalt grey
        [0.55, 0.25, 0.22],  # red-ish
        [0.25, 0.50, 0.30],  # green-ish
        [0.28, 0.32, 0.58],  # blue-ish
        [0.55, 0.50, 0.25],
        [0.45, 0.28, 0.50],
    ]
)
# (period in pixels, orientation) per class; orientation 0 horizontal, 1 vertical, 2 checker
_TEXTURES = [(16, 0), (4, 0), (4, 1), (2, 2), (6, 2), (3, 1)]
TEXTURE_AMPLITUDE = 0.08
COLOR_JITTER = 0.08


@dataclass
class SynthScene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int64 in [0, K)
    gain: Optional[np.ndarray] = None  # (H, W) exposure field, night only
    index: int = 0


def _scene_streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    geometry, photometry = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(geometry), np.random.default_rng(photometry)


def _texture(cls: int, size: int, phase: tuple[int, int]) -> np.ndarray:
    period, orient = _TEXTURES[cls % len(_TEXTURES)]
    yy, xx = np.mgrid[0:size, 0:size]
    yy = yy + phase[0]
    xx = xx + phase[1]
    if orient == 0:
        wave = np.cos(2 * np.pi * yy / period)
    elif orient == 1:
        wave = np.cos(2 * np.pi * xx / period)
    else:
        wave = np.sign(np.cos(2 * np.pi * yy / period) * np.cos(2 * np.pi * xx / period))
    return wave


def _layout(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    labels = np.zeros((size, size), dtype=np.int64)
    for _ in range(rng.integers(3, 7)):
        cls = int(rng.integers(1, classes))
        h, w = rng.integers(size // 6, size // 2, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        labels[y:y + h, x:x + w] = cls
    return labels


def _albedo(rng: np.random.Generator, labels: np.ndarray, classes: int) -> np.ndarray:
    size = labels.shape[0]
    img = np.empty((3, size, size))
    for cls in range(classes):
        color = _PALETTE[cls % len(_PALETTE)] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
        tex = _texture(cls, size, tuple(rng.integers(0, 16, size=2)))
        layer = color[:, None, None] + TEXTURE_AMPLITUDE * tex[None]
        mask = labels == cls
        img[:, mask] = layer[:, mask]
    return img


def exposure_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth gain map: dark surround with a few bright light pools, mapped into GAIN_RANGE."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.full((size, size), rng.uniform(0.05, 0.35))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(size / 10, size / 3)
        field += rng.uniform(0.5, 1.2) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    field = np.clip(field, 0.0, 1.0)
    lo, hi = GAIN_RANGE
    return lo + (hi - lo) * field


def render_scene(seed: int, index: int, style: str, size: int = 64, classes: int = 4) -> SynthScene:
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}, got {style!r}")
    geo, photo = _scene_streams(seed, index)
    labels = _layout(geo, size, classes)
    img = _albedo(geo, labels, classes)
    if style == "day":
        return SynthScene(img, labels, None, index)
    gain = exposure_field(photo, size)
    noisy = gain[None] * img + photo.normal(0.0, NOISE_SIGMA, img.shape)
    return SynthScene(np.clip(noisy, 0.0, 1.0), labels, gain, index)


def synth_dataset(count: int, seed: int, style: str, size: int = 64, classes: int = 4) -> list[SynthScene]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [render_scene(seed, i, style, size, classes) for i in range(count)]


def stack(scenes: list[SynthScene]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes])


def to_gray(scene: SynthScene) -> np.ndarray:
    """BT.601 luma of the scene image, (H, W) in [0, 1]."""
    return np.tensordot(np.array([0.299, 0.587, 0.114]), scene.image, axes=1)
