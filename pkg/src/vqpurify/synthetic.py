"""Procedural shapes dataset used as the desk-scale stand-in for CIFAR-10.

Class = (shape type, colour family). Five shapes times two colour families
gives ten classes. Every image is drawn from its own generator seeded by
``(seed, index)`` so any single sample can be regenerated in isolation.
"""

from __future__ import annotations

import colorsys

import numpy as np

SHAPES = ("disc", "square", "triangle", "cross", "ring")
# hue ranges in [0, 1); warm and cool families never overlap
COLOR_FAMILIES = ((0.97, 0.13), (0.48, 0.68))

IMAGE_SIZE = 32


def class_of(shape_id: int, family_id: int) -> int:
    return family_id * len(SHAPES) + shape_id


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _sdf(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Signed distance (pixels) to the shape boundary in its local frame."""
    if shape == "disc":
        return np.hypot(u, v) - r
    if shape == "square":
        s = r * 0.85
        return np.maximum(np.abs(u), np.abs(v)) - s
    if shape == "triangle":
        # equilateral, pointing up, circumradius r
        k = np.sqrt(3.0)
        d1 = v - r * 0.5
        d2 = (-k * u - v) / 2.0 - r * 0.5
        d3 = (k * u - v) / 2.0 - r * 0.5
        return np.maximum(np.maximum(d1, d2), d3)
    if shape == "cross":
        arm = r * 0.35
        a = np.maximum(np.abs(u) - r, np.abs(v) - arm)
        b = np.maximum(np.abs(u) - arm, np.abs(v) - r)
        return np.minimum(a, b)
    if shape == "ring":
        return np.abs(np.hypot(u, v) - r * 0.72) - r * 0.28
    raise ValueError(f"unknown shape {shape!r}")


def render(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw one (3, size, size) float image in [0, 1] for ``label``."""
    family_id, shape_id = divmod(label, len(SHAPES))
    shape = SHAPES[shape_id]
    scale = size / 32.0

    # smooth two-tone background, low saturation
    bg_h = rng.uniform(0.0, 1.0)
    c0 = _hsv(bg_h, rng.uniform(0.0, 0.25), rng.uniform(0.15, 0.45))
    c1 = _hsv(bg_h + rng.uniform(-0.1, 0.1), rng.uniform(0.0, 0.25), rng.uniform(0.15, 0.45))
    angle = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    t = ((xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle)) / size + 0.5
    t = np.clip(t, 0.0, 1.0)[None]
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    lo, hi = COLOR_FAMILIES[family_id]
    if lo > hi:
        hue = rng.uniform(lo, hi + 1.0)
    else:
        hue = rng.uniform(lo, hi)
    fg = _hsv(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0))

    r = rng.uniform(7.0, 11.0) * scale
    cx = size / 2 + rng.uniform(-5.0, 5.0) * scale
    cy = size / 2 + rng.uniform(-5.0, 5.0) * scale
    rot = rng.uniform(0.0, 2 * np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    alpha = np.clip(0.5 - _sdf(shape, u, v, r), 0.0, 1.0)[None]
    img = img * (1 - alpha) + fg[:, None, None] * alpha
    return np.clip(img, 0.0, 1.0)


def generate(n_per_class: int, n_classes: int, seed: int, size: int = IMAGE_SIZE):
    """Return ``(images[N,3,size,size] float32, labels[N] int64)``, class-interleaved."""
    if not 1 <= n_classes <= 10:
        raise ValueError(f"n_classes must be in [1, 10], got {n_classes}")
    n = n_per_class * n_classes
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % n_classes
        rng = np.random.default_rng([seed, i])
        images[i] = render(label, rng, size)
        labels[i] = label
    return images, labels
