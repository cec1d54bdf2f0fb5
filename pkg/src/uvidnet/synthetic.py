"""Synthetic labeled scenes for smoke tests and demos."""
from __future__ import annotations

import numpy as np

from .train import Samples

SCENE_COLORS = np.array([[0.1, 0.8, 0.1], [0.5, 0.5, 0.5], [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]], np.float32)


def synthetic_scene(seed: int, size: int = 64, classes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Random rectangles of class colors plus mild noise: (3, H, W) image, (H, W) labels."""
    rng = np.random.default_rng(seed)
    colors = SCENE_COLORS[:classes]
    labels = np.zeros((size, size), np.int64)
    for _ in range(6):
        y, x = rng.integers(0, size - size // 4, 2)
        h, w = rng.integers(size // 8, size // 3, 2)
        labels[y:y + h, x:x + w] = rng.integers(0, classes)
    image = colors[labels].transpose(2, 0, 1) + 0.05 * rng.standard_normal((3, size, size)).astype(np.float32)
    return image.astype(np.float32), labels


def toy_samples(n: int = 2, size: int = 64, seed: int = 0, classes: int = 4) -> Samples:
    """`n` synthetic pairs: frame_a is a noisy copy of the keyframe frame_b."""
    rng = np.random.default_rng(seed + 10_000)
    scenes = [synthetic_scene(seed + i, size, classes) for i in range(n)]
    b = np.stack([img for img, _ in scenes])
    a = (b + 0.05 * rng.standard_normal(b.shape)).astype(np.float32)
    return Samples(a, b, np.stack([lab for _, lab in scenes]))
