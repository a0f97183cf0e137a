"""Procedural glyph-classification task: one 8x8 glyph on a noisy 32x32 canvas."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GLYPH_ROWS = [
    # plus
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    # cross
    ["##....##", ".##..##.", "..####..", "...##...", "...##...", "..####..", ".##..##.", "##....##"],
    # hollow square
    ["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"],
    # diagonal bar
    ["##......", "###.....", ".###....", "..###...", "...###..", "....###.", ".....###", "......##"],
    # letter T
    ["########", "########", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    # letter L
    ["##......", "##......", "##......", "##......", "##......", "##......", "########", "########"],
    # ring
    ["..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."],
    # checker
    ["##..##..", "##..##..", "..##..##", "..##..##", "##..##..", "##..##..", "..##..##", "..##..##"],
]

GLYPHS = np.array([[[c == "#" for c in row] for row in g] for g in _GLYPH_ROWS], dtype=np.float32)
GLYPH_SIZE = 8
CANVAS = 32


@dataclass
class GlyphDataset:
    images: np.ndarray  # (n, 1, 32, 32) float32
    labels: np.ndarray  # (n,) int64
    boxes: np.ndarray  # (n, 4) int: top, left, bottom (excl.), right (excl.)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "GlyphDataset":
        return GlyphDataset(self.images[idx], self.labels[idx], self.boxes[idx])


def make_glyph_dataset(n: int, seed: int = 0, noise_sigma: float = 0.1, canvas: int = CANVAS) -> GlyphDataset:
    if canvas < GLYPH_SIZE:
        raise ValueError(f"canvas must be at least {GLYPH_SIZE} pixels")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(GLYPHS), n)
    top = rng.integers(0, canvas - GLYPH_SIZE + 1, n)
    left = rng.integers(0, canvas - GLYPH_SIZE + 1, n)
    images = (rng.standard_normal((n, 1, canvas, canvas)) * noise_sigma).astype(np.float32)
    for i in range(n):
        images[i, 0, top[i]:top[i] + GLYPH_SIZE, left[i]:left[i] + GLYPH_SIZE] += GLYPHS[labels[i]]
    boxes = np.stack([top, left, top + GLYPH_SIZE, left + GLYPH_SIZE], axis=1)
    return GlyphDataset(images, labels.astype(np.int64), boxes)


def box_mask(box, shape, margin: int = 0) -> np.ndarray:
    """Boolean mask of ``box`` grown by ``margin`` pixels and clipped to ``shape``."""
    H, W = shape
    t, l, b, r = box
    m = np.zeros((H, W), dtype=bool)
    m[max(t - margin, 0):min(b + margin, H), max(l - margin, 0):min(r + margin, W)] = True
    return m
