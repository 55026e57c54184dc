"""Procedural aligned image pairs standing in for two sensing modalities."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def synth_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Multi-scale smooth noise plus a few random ellipses and boxes, scaled to [0, 1]."""
    img = np.zeros((size, size))
    for sigma, amp in ((1.0, 0.3), (2.5, 0.6), (5.0, 0.8)):
        n = gaussian_filter(rng.standard_normal((size, size)), sigma)
        img += amp * n / (n.std() + 1e-8)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(8):
        cx, cy = rng.uniform(0, size, 2)
        a, b = rng.uniform(3, 12, 2)
        ang = rng.uniform(0, np.pi)
        c, s = np.cos(ang), np.sin(ang)
        u = ((xx - cx) * c + (yy - cy) * s) / a
        v = (-(xx - cx) * s + (yy - cy) * c) / b
        if rng.random() < 0.5:
            m = u ** 2 + v ** 2 < 1
        else:
            m = (np.abs(u) < 1) & (np.abs(v) < 1)
        img[m] += rng.uniform(-2, 2)
    img = gaussian_filter(img, 0.7)
    return ((img - img.min()) / (img.max() - img.min())).astype(np.float32)


def second_modality(rng: np.random.Generator, a: np.ndarray, noise: float = 0.03) -> np.ndarray:
    """Monotone nonlinear intensity remap of ``a`` with sensor noise."""
    b = np.asarray(a, dtype=np.float64) ** rng.uniform(0.4, 2.5)
    b = 1.0 / (1.0 + np.exp(-rng.uniform(4, 10) * (b - 0.5)))
    b = (b - b.min()) / (b.max() - b.min() + 1e-12)
    b = b + rng.normal(0, noise, b.shape)
    return np.clip(b, 0, 1).astype(np.float32)


def synth_pairs(n: int, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` aligned (modality A, modality B) pairs, deterministic in ``seed``."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        a = synth_image(rng, size)
        out.append((a, second_modality(rng, a)))
    return out
